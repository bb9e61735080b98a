"""Dose-volume metrics and the statistics used to report them.

Everything here is a pure function of a dose map and a binary mask, in
float64 regardless of storage precision. Voxel-counting semantics: a
voxel "receives at least d" when dose >= d, ties included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DosimetryError(ValueError):
    pass


def _masked(dose: np.ndarray, mask: np.ndarray, who: str) -> np.ndarray:
    if dose.shape != mask.shape:
        raise DosimetryError(f"{who}: dose {dose.shape} and mask {mask.shape} differ")
    vals = np.asarray(dose, dtype=np.float64)[np.asarray(mask) > 0]
    if vals.size == 0:
        raise DosimetryError(f"{who}: empty mask")
    return vals


@dataclass
class DVHCurve:
    """Cumulative histogram: fractions[k] of the structure receiving at
    least k * bin_width Gy."""

    structure: str
    bin_width: float
    fractions: np.ndarray

    def dose_axis(self) -> np.ndarray:
        return np.arange(self.fractions.size) * self.bin_width


def dvh(dose: np.ndarray, mask: np.ndarray, bin_width: float = 0.1,
        structure: str = "") -> DVHCurve:
    vals = _masked(dose, mask, "dvh")
    if bin_width <= 0:
        raise DosimetryError(f"dvh: bin width must be positive, got {bin_width}")
    top = float(vals.max())
    n_bins = max(1, int(math.ceil(top / bin_width - 1e-12))) if top > 0 else 1
    thresholds = np.arange(n_bins + 1) * bin_width
    ordered = np.sort(vals)
    counts = vals.size - np.searchsorted(ordered, thresholds, side="left")
    return DVHCurve(structure=structure, bin_width=bin_width,
                    fractions=counts / vals.size)


def v_at(dose: np.ndarray, mask: np.ndarray, threshold_gy: float) -> float:
    """Fraction of the structure receiving at least the threshold dose."""
    vals = _masked(dose, mask, "v_at")
    return float((vals >= threshold_gy).sum() / vals.size)


def d_stats(dose: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(mean, max) dose over the structure."""
    vals = _masked(dose, mask, "d_stats")
    return float(vals.mean()), float(vals.max())


def d_at_volume(dose: np.ndarray, mask: np.ndarray, volume_pct: float) -> float:
    """Dose received by the hottest volume_pct of the structure: the
    ceil(v% * n)-th largest masked dose."""
    if not 0 < volume_pct <= 100:
        raise DosimetryError(f"d_at_volume: volume {volume_pct}% outside (0, 100]")
    vals = _masked(dose, mask, "d_at_volume")
    n = vals.size
    k = int(math.ceil(volume_pct / 100.0 * n - 1e-9))
    k = min(max(k, 1), n)
    return float(np.sort(vals)[n - k])


def conformity_index(dose: np.ndarray, ptv_mask: np.ndarray, prescription_gy: float,
                     isodose_pct: float = 100.0) -> float:
    """Paddick index: overlap^2 / (target volume * prescription isodose volume)."""
    _masked(dose, ptv_mask, "conformity_index")  # validates shapes and nonemptiness
    level = prescription_gy * isodose_pct / 100.0
    piv = np.asarray(dose, dtype=np.float64) >= level
    n_piv = int(piv.sum())
    if n_piv == 0:
        return 0.0
    target = np.asarray(ptv_mask) > 0
    overlap = int((piv & target).sum())
    return overlap * overlap / (int(target.sum()) * n_piv)


HI_FORMULAS = ("dmax", "d2d98")


def homogeneity_index(dose: np.ndarray, ptv_mask: np.ndarray, prescription_gy: float,
                      formula: str = "dmax") -> float:
    """Dose-uniformity score over the target.

    "dmax": maximum target dose over the prescription.
    "d2d98": (D2 - D98) / D50, the near-max minus near-min spread.
    """
    if formula == "dmax":
        _, dmax = d_stats(dose, ptv_mask)
        return dmax / prescription_gy
    if formula == "d2d98":
        d2 = d_at_volume(dose, ptv_mask, 2.0)
        d98 = d_at_volume(dose, ptv_mask, 98.0)
        d50 = d_at_volume(dose, ptv_mask, 50.0)
        if d50 == 0:
            raise DosimetryError("homogeneity_index: median target dose is zero")
        return (d2 - d98) / d50
    raise DosimetryError(f"unknown homogeneity formula {formula!r}; pick from {HI_FORMULAS}")


def param_abs_err(pred, gt) -> list[dict]:
    """Per-field absolute differences between two parameter tables, in
    natural units. Rows must describe the same structures in order;
    fields absent on a row (ring volume) are skipped."""
    if len(pred.rows) != len(gt.rows):
        raise DosimetryError(f"tables have {len(pred.rows)} vs {len(gt.rows)} rows")
    out = []
    for p, g in zip(pred.rows, gt.rows):
        if p.structure != g.structure:
            raise DosimetryError(f"structure mismatch: {p.structure} vs {g.structure}")
        entry = {"structure": p.structure,
                 "weight": abs(p.weight - g.weight),
                 "dose": abs(p.dose - g.dose)}
        if p.volume is not None and g.volume is not None:
            entry["volume"] = abs(p.volume - g.volume)
        out.append(entry)
    return out


def mad(pred, gt) -> float:
    """Mean absolute difference between two equally long series."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape or a.size < 1:
        raise DosimetryError(f"mad: incompatible series of shapes {a.shape} and {b.shape}")
    return float(np.mean(np.abs(a - b)))


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_t_test(errs_a, errs_b) -> TTestResult:
    """Two-tailed paired t-test on the element-wise differences.

    Zero variance of the differences is reported as degenerate with
    p = 1 rather than dividing by zero.
    """
    a = np.asarray(errs_a, dtype=np.float64)
    b = np.asarray(errs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DosimetryError(f"paired_t_test: incompatible series {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise DosimetryError(f"paired_t_test: need at least 2 pairs, got {n}")
    d = a - b
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        return TTestResult(t=0.0, p=1.0, dof=dof, degenerate=True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = student_t_two_tailed_p(t, dof)
    return TTestResult(t=t, p=p, dof=dof)


def student_t_two_tailed_p(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta:
    p = I_x(dof/2, 1/2) with x = dof / (dof + t^2)."""
    if dof < 1:
        raise DosimetryError(f"t distribution needs dof >= 1, got {dof}")
    x = dof / (dof + t * t)
    return _betainc_reg(0.5 * dof, 0.5, x)


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), continued-fraction form."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def _beta_cf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-14) -> float:
    # modified Lentz iteration for the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise DosimetryError("incomplete beta continued fraction did not converge")
