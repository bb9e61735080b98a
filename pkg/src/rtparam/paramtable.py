"""Treatment-plan parameter tables: one row per structure.

Rings carry a maximum-dose objective (weight, dose); organs at risk
carry a dose-volume objective (weight, volume, dose). Serialized as CSV
with the header ``structure,function,weight_pct,volume_pct,dose_gy``;
ring rows leave the volume column empty ("-" is accepted on read).
"""
from __future__ import annotations

import io
from dataclasses import dataclass

RING_NAMES = ("Ring1", "Ring2", "Ring3", "Ring4", "Ring5")
OAR_NAMES = ("Bladder", "ST", "FHL", "FHR")
STRUCTURE_ORDER = RING_NAMES + OAR_NAMES

FUNCTION_MAX_DOSE = "MaxDose"
FUNCTION_MAX_DVH = "MaxDVH"

CSV_HEADER = "structure,function,weight_pct,volume_pct,dose_gy"


class ParamTableError(ValueError):
    pass


@dataclass
class ParamRow:
    structure: str
    function: str
    weight: float
    volume: float | None
    dose: float

    def validate(self) -> None:
        if self.function not in (FUNCTION_MAX_DOSE, FUNCTION_MAX_DVH):
            raise ParamTableError(f"{self.structure}: unknown function {self.function!r}")
        if self.function == FUNCTION_MAX_DOSE and self.volume is not None:
            raise ParamTableError(f"{self.structure}: maximum-dose rows carry no volume")
        if self.function == FUNCTION_MAX_DVH and self.volume is None:
            raise ParamTableError(f"{self.structure}: dose-volume rows need a volume")
        if not 0 < self.weight <= 100:
            raise ParamTableError(f"{self.structure}: weight {self.weight} outside (0, 100]")
        if self.volume is not None and not 0 < self.volume <= 100:
            raise ParamTableError(f"{self.structure}: volume {self.volume} outside (0, 100]")
        if self.dose <= 0:
            raise ParamTableError(f"{self.structure}: dose {self.dose} must be positive")


@dataclass
class ParamTable:
    rows: list[ParamRow]

    def validate(self) -> None:
        for row in self.rows:
            row.validate()

    def row(self, structure: str) -> ParamRow:
        for r in self.rows:
            if r.structure == structure:
                return r
        raise KeyError(structure)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(CSV_HEADER + "\n")
        for r in self.rows:
            out.write(f"{r.structure},{r.function},{_fmt(r.weight)},"
                      f"{'' if r.volume is None else _fmt(r.volume)},{r.dose:.2f}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ParamTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != CSV_HEADER:
            raise ParamTableError(f"bad header: {lines[0]!r}" if lines else "empty parameter file")
        rows = []
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 5:
                raise ParamTableError(f"malformed row: {ln!r}")
            structure, function, weight, volume, dose = (p.strip() for p in parts)
            vol = None if volume in ("", "-") else float(volume)
            rows.append(ParamRow(structure, function, float(weight), vol, float(dose)))
        table = cls(rows)
        table.validate()
        return table


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.2f}"
