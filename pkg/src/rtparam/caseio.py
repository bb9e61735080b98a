"""On-disk layout for phantom cases.

Raster file ("RTR1"): magic, u32 LE height, u32 LE width, u8 dtype code
(0 = float32, 1 = uint8), row-major little-endian payload. A case
directory holds ct/dose rasters (f32), the PTV / OAR / ring masks (u8),
params.csv and meta.json. Datasets add split.json and dataset.json at
the top level.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .paramtable import ParamTable
from .util import atomic_write_bytes, atomic_write_text, canonical_json

RASTER_MAGIC = b"RTR1"
DTYPE_F32 = 0
DTYPE_U8 = 1

MASK_NAMES = ("mask_ptv", "mask_bladder", "mask_st", "mask_fhl", "mask_fhr")
RING_FILES = tuple(f"ring{i}" for i in range(1, 6))


class CaseIOError(ValueError):
    pass


def write_raster(path: str, array: np.ndarray) -> None:
    if array.ndim != 2:
        raise CaseIOError(f"{path}: rasters are 2-d, got shape {array.shape}")
    if array.dtype == np.float32:
        code, payload = DTYPE_F32, array.astype("<f4").tobytes()
    elif array.dtype == np.uint8:
        code, payload = DTYPE_U8, array.tobytes()
    else:
        raise CaseIOError(f"{path}: unsupported raster dtype {array.dtype}")
    h, w = array.shape
    atomic_write_bytes(path, RASTER_MAGIC + struct.pack("<IIB", h, w, code) + payload)


def read_raster(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(13)
        if len(header) < 13 or header[:4] != RASTER_MAGIC:
            raise CaseIOError(f"{path}: not a raster file (bad or short header)")
        h, w, code = struct.unpack("<IIB", header[4:13])
        if code == DTYPE_F32:
            dtype, itemsize = "<f4", 4
        elif code == DTYPE_U8:
            dtype, itemsize = "u1", 1
        else:
            raise CaseIOError(f"{path}: unknown dtype code {code}")
        payload = fh.read(h * w * itemsize)
        if len(payload) != h * w * itemsize:
            raise CaseIOError(f"{path}: truncated payload, expected {h * w * itemsize} bytes, got {len(payload)}")
        if fh.read(1):
            raise CaseIOError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr.astype(np.float32) if code == DTYPE_F32 else arr.copy()


@dataclass
class Case:
    """One phantom patient: CT, structure masks, ring masks, dose, parameters."""

    ct: np.ndarray
    mask_ptv: np.ndarray
    mask_bladder: np.ndarray
    mask_st: np.ndarray
    mask_fhl: np.ndarray
    mask_fhr: np.ndarray
    rings: list[np.ndarray]
    dose: np.ndarray
    params: ParamTable
    meta: dict = field(default_factory=dict)

    def oar_masks(self) -> dict[str, np.ndarray]:
        return {"Bladder": self.mask_bladder, "ST": self.mask_st,
                "FHL": self.mask_fhl, "FHR": self.mask_fhr}

    def structure_masks(self) -> dict[str, np.ndarray]:
        masks = {"PTV": self.mask_ptv}
        masks.update(self.oar_masks())
        for i, ring in enumerate(self.rings, start=1):
            masks[f"Ring{i}"] = ring
        return masks

    @property
    def prescription(self) -> float:
        return float(self.meta["prescription_gy"])


def write_case(case: Case, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    write_raster(os.path.join(directory, "ct.rtr1"), case.ct.astype(np.float32))
    write_raster(os.path.join(directory, "dose.rtr1"), case.dose.astype(np.float32))
    for name in MASK_NAMES:
        write_raster(os.path.join(directory, f"{name}.rtr1"), getattr(case, name).astype(np.uint8))
    for fname, ring in zip(RING_FILES, case.rings):
        write_raster(os.path.join(directory, f"{fname}.rtr1"), ring.astype(np.uint8))
    atomic_write_text(os.path.join(directory, "params.csv"), case.params.to_csv())
    atomic_write_text(os.path.join(directory, "meta.json"), canonical_json(case.meta))


def read_case(directory: str, require_dose: bool = True) -> Case:
    def load(name):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise CaseIOError(f"missing file: {path}")
        return read_raster(path)

    ct = load("ct.rtr1")
    masks = {name: load(f"{name}.rtr1") for name in MASK_NAMES}
    rings = [load(f"{f}.rtr1") for f in RING_FILES]

    dose_path = os.path.join(directory, "dose.rtr1")
    params_path = os.path.join(directory, "params.csv")
    if require_dose or os.path.exists(dose_path):
        dose = load("dose.rtr1")
    else:
        dose = np.zeros_like(ct)
    if require_dose or os.path.exists(params_path):
        if not os.path.exists(params_path):
            raise CaseIOError(f"missing file: {params_path}")
        with open(params_path, "r", encoding="utf-8") as fh:
            params = ParamTable.from_csv(fh.read())
    else:
        params = ParamTable(rows=[])

    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise CaseIOError(f"missing file: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)

    shapes = {arr.shape for arr in [ct, dose, *masks.values(), *rings]}
    if len(shapes) != 1:
        raise CaseIOError(f"{directory}: raster dimensions disagree: {sorted(shapes)}")

    return Case(ct=ct, dose=dose, rings=rings, params=params, meta=meta, **masks)


def case_dirs(dataset_dir: str) -> list[str]:
    names = sorted(d for d in os.listdir(dataset_dir) if d.startswith("case_"))
    return [os.path.join(dataset_dir, d) for d in names]


def write_split(dataset_dir: str, train: list[int], test: list[int]) -> None:
    atomic_write_text(os.path.join(dataset_dir, "split.json"),
                      canonical_json({"test": test, "train": train}))


def read_split(dataset_dir: str) -> tuple[list[int], list[int]]:
    with open(os.path.join(dataset_dir, "split.json"), "r", encoding="utf-8") as fh:
        split = json.load(fh)
    return list(split["train"]), list(split["test"])


def split_case_dirs(dataset_dir: str) -> tuple[list[str], list[str]]:
    train_ids, test_ids = read_split(dataset_dir)
    by_index = {int(os.path.basename(d).split("_")[1]): d for d in case_dirs(dataset_dir)}
    return [by_index[i] for i in train_ids], [by_index[i] for i in test_ids]


def read_dataset_meta(dataset_dir: str) -> dict:
    with open(os.path.join(dataset_dir, "dataset.json"), "r", encoding="utf-8") as fh:
        return json.load(fh)
