"""Deterministic synthetic pelvic phantoms.

Each case is a 2D axial slice: an elliptical body with soft-tissue
texture, a target volume near the posterior center, a bladder anterior
to it, a bowel blob above that, and two bright femoral-head discs at the
sides. An analytic dose field decays exponentially with distance from
the target, and the ground-truth parameter table is derived from that
stored dose map, so the table can always be re-derived exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .caseio import Case
from .dosimetry import d_at_volume
from .paramtable import (
    FUNCTION_MAX_DOSE,
    FUNCTION_MAX_DVH,
    OAR_NAMES,
    RING_NAMES,
    ParamRow,
    ParamTable,
)
from .util import canonical_json, quantize2, rng_for, sha256_text

DEFAULT_RING_BANDS_64 = ((0.0, 2.0), (2.0, 4.0), (4.0, 7.0), (7.0, 11.0), (11.0, 16.0))

# Table-pattern bases: (weight, volume) per OAR, weight per ring.
OAR_BASE = {"Bladder": (20.0, 31.0), "ST": (20.0, 22.0), "FHL": (10.0, 5.0), "FHR": (10.0, 5.0)}
RING_BASE_WEIGHT = 20.0


class PhantomError(ValueError):
    pass


def _scaled_bands(size: int) -> tuple[tuple[float, float], ...]:
    s = size / 64.0
    return tuple((lo * s, hi * s) for lo, hi in DEFAULT_RING_BANDS_64)


@dataclass
class PhantomConfig:
    size: int = 64
    prescription_gy: float = 50.4
    ring_bands: tuple[tuple[float, float], ...] | None = None
    falloff_range: tuple[float, float] | None = None  # pixels, scaled from (4, 8) at size 64
    modulation_range: tuple[float, float] = (0.01, 0.05)
    modulation_cycles: int = 4  # cosine periods across the columns
    noise_sigma: float = 0.2
    perturb_params: bool = True

    def __post_init__(self):
        if self.ring_bands is None:
            self.ring_bands = _scaled_bands(self.size)
        else:
            self.ring_bands = tuple((float(lo), float(hi)) for lo, hi in self.ring_bands)
        if self.falloff_range is None:
            s = self.size / 64.0
            self.falloff_range = (4.0 * s, 8.0 * s)
        if self.size < 32:
            raise PhantomError(f"grid size {self.size} below the 32-pixel minimum")
        if self.size > 512:
            raise PhantomError(f"grid size {self.size} above the 512-pixel maximum")
        if self.prescription_gy <= 0:
            raise PhantomError("prescription dose must be positive")
        if len(self.ring_bands) != 5:
            raise PhantomError("exactly five ring bands required")
        if self.ring_bands[0][0] != 0.0:
            raise PhantomError("ring bands must start at distance 0")
        for (lo, hi), (lo2, _) in zip(self.ring_bands, self.ring_bands[1:]):
            if hi != lo2:
                raise PhantomError("ring bands must be contiguous")
        for lo, hi in self.ring_bands:
            if lo >= hi:
                raise PhantomError(f"empty ring band ({lo}, {hi})")
        if self.modulation_range[1] > 0.05:
            raise PhantomError("lateral modulation amplitude is capped at 5%")

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "prescription_gy": self.prescription_gy,
            "ring_bands": [list(b) for b in self.ring_bands],
            "falloff_range": list(self.falloff_range),
            "modulation_range": list(self.modulation_range),
            "modulation_cycles": self.modulation_cycles,
            "noise_sigma": self.noise_sigma,
            "perturb_params": self.perturb_params,
        }

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))[:16]


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0


def distance_to_structure(mask: np.ndarray) -> np.ndarray:
    """Euclidean pixel distance to the nearest structure pixel (0 inside)."""
    if not mask.any():
        raise PhantomError("distance transform of an empty structure")
    return ndimage.distance_transform_edt(mask == 0)


def ring_masks(ptv: np.ndarray, bands, body: np.ndarray) -> list[np.ndarray]:
    """Annuli of increasing distance from the target, clipped to the body."""
    dist = distance_to_structure(ptv)
    outside = (ptv == 0) & (body > 0)
    rings = []
    for lo, hi in bands:
        ring = outside & (dist >= lo) & (dist < hi)
        rings.append(ring.astype(np.uint8))
    return rings


def _geometry(cfg: PhantomConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    s = cfg.size

    def u(lo, hi):
        return rng.uniform(lo, hi)

    body = _ellipse(s, 0.50 * s, 0.50 * s, 0.40 * s, 0.46 * s)
    ptv = _ellipse(s, (0.60 + u(-0.02, 0.02)) * s, (0.50 + u(-0.03, 0.03)) * s,
                   (0.10 + u(-0.02, 0.02)) * s, (0.12 + u(-0.02, 0.02)) * s)
    bladder = _ellipse(s, (0.38 + u(-0.02, 0.02)) * s, (0.50 + u(-0.02, 0.02)) * s,
                       (0.085 + u(-0.01, 0.015)) * s, (0.12 + u(-0.015, 0.02)) * s)
    st_main = _ellipse(s, (0.19 + u(-0.015, 0.015)) * s, (0.50 + u(-0.04, 0.04)) * s,
                       (0.07 + u(-0.01, 0.01)) * s, (0.15 + u(-0.02, 0.02)) * s)
    st_side = _ellipse(s, (0.22 + u(-0.02, 0.02)) * s, (0.50 + u(-0.10, 0.10)) * s,
                       0.05 * s, 0.08 * s)
    st = st_main | st_side
    fhr = _ellipse(s, (0.58 + u(-0.01, 0.01)) * s, (0.17 + u(-0.01, 0.01)) * s,
                   (0.065 + u(-0.008, 0.008)) * s, (0.065 + u(-0.008, 0.008)) * s)
    fhl = _ellipse(s, (0.58 + u(-0.01, 0.01)) * s, (0.83 + u(-0.01, 0.01)) * s,
                   (0.065 + u(-0.008, 0.008)) * s, (0.065 + u(-0.008, 0.008)) * s)

    # clip to body, then resolve overlaps by priority
    ptv &= body
    bladder &= body & ~ptv
    st &= body & ~ptv & ~bladder
    fhl &= body & ~ptv & ~bladder & ~st
    fhr &= body & ~ptv & ~bladder & ~st & ~fhl

    structures = {"body": body, "ptv": ptv, "bladder": bladder, "st": st, "fhl": fhl, "fhr": fhr}
    for name, mask in structures.items():
        if not mask.any():
            raise PhantomError(f"geometry infeasible at size {s}: structure {name} is empty")
    return {k: v.astype(np.uint8) for k, v in structures.items()}


def falloff_for_geometry(ptv: np.ndarray, cfg: PhantomConfig) -> float:
    """Falloff length in pixels, tied to the target's cross-section so the
    dose gradient is a deterministic function of the visible anatomy."""
    lo, hi = cfg.falloff_range
    nominal = math.pi * (0.10 * cfg.size) * (0.12 * cfg.size)
    frac = (float(ptv.sum()) / nominal - 0.7) / 0.6
    return lo + (hi - lo) * min(max(frac, 0.0), 1.0)


def _modulation_wave(cfg: PhantomConfig, rng: np.random.Generator):
    """(amplitude, per-column wave) of the lateral fluence modulation; the
    same draw shades the CT texture so the pattern is visible to stage one."""
    lo, hi = cfg.modulation_range
    if hi <= 0:
        return 0.0, np.zeros(cfg.size)
    amplitude = rng.uniform(lo, hi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    cols = np.arange(cfg.size) / cfg.size
    return amplitude, np.cos(2.0 * math.pi * cfg.modulation_cycles * cols + phase)


def _ct_texture(geo: dict[str, np.ndarray], cfg: PhantomConfig, rng: np.random.Generator,
                amplitude: float, wave: np.ndarray) -> np.ndarray:
    s = cfg.size
    noise = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=s / 24.0)
    spread = noise.std()
    if spread > 0:
        noise = noise / spread
    ct = np.full((s, s), 0.02, dtype=np.float64)
    body = geo["body"] > 0
    ct[body] = 0.32 + 0.05 * noise[body] + 0.8 * amplitude * np.broadcast_to(wave, (s, s))[body]
    ct[geo["bladder"] > 0] += 0.10
    ct[geo["st"] > 0] += 0.05
    ct[geo["ptv"] > 0] += 0.08
    bone = (geo["fhl"] > 0) | (geo["fhr"] > 0)
    ct[bone] = 0.88 + 0.04 * noise[bone]
    return np.clip(ct, 0.0, 1.0).astype(np.float32)


def analytic_dose(geo: dict[str, np.ndarray], cfg: PhantomConfig,
                  rng: np.random.Generator,
                  modulation: tuple[float, np.ndarray] | None = None) -> np.ndarray:
    """Exponential falloff from the target with a small lateral cosine
    modulation and optional clipped gaussian noise; zero outside the body."""
    s = cfg.size
    dp = cfg.prescription_gy
    dist = distance_to_structure(geo["ptv"])
    tau = falloff_for_geometry(geo["ptv"], cfg)
    dose = dp * np.exp(-dist / tau)
    amplitude, wave = modulation if modulation is not None else _modulation_wave(cfg, rng)
    if amplitude > 0:
        dose = dose * (1.0 + amplitude * wave)[None, :]
    if cfg.noise_sigma > 0:
        dose = dose + rng.normal(0.0, cfg.noise_sigma, size=(s, s))
    dose = np.clip(dose, 0.0, 1.1 * dp)
    dose[geo["body"] == 0] = 0.0
    return dose.astype(np.float32)


def ground_truth_params(dose: np.ndarray, masks: dict[str, np.ndarray],
                        cfg: PhantomConfig, seed: int) -> ParamTable:
    """Derive the parameter table from a (stored) dose map.

    Ring rows take the masked maximum dose; OAR rows take the dose to
    their volume fraction. Weights and volumes follow the clinical
    pattern, jittered by the case's own parameter stream when enabled,
    so re-derivation from the same dose map and seed is exact.
    """
    rng = rng_for(seed, "params")
    perturb = cfg.perturb_params
    rows = []
    for name in RING_NAMES:
        jitter = rng.uniform(-5.0, 5.0) if perturb else 0.0
        weight = float(round(RING_BASE_WEIGHT + jitter))
        ring = masks[name]
        if not ring.any():
            raise PhantomError(f"{name}: empty mask")
        dose_val = quantize2(float(dose[ring > 0].max()))
        rows.append(ParamRow(name, FUNCTION_MAX_DOSE, weight, None, dose_val))
    for name in OAR_NAMES:
        base_w, base_v = OAR_BASE[name]
        rel = rng.uniform(-0.2, 0.2) if perturb else 0.0
        volume = float(min(100, max(1, round(base_v * (1.0 + rel)))))
        jitter = rng.uniform(-5.0, 5.0) if perturb else 0.0
        weight = float(round(base_w + jitter))
        mask = masks[name]
        if not mask.any():
            raise PhantomError(f"{name}: empty mask")
        dose_val = quantize2(d_at_volume(dose, mask, volume))
        rows.append(ParamRow(name, FUNCTION_MAX_DVH, weight, volume, dose_val))
    table = ParamTable(rows)
    table.validate()
    return table


def generate_case(cfg: PhantomConfig, seed: int) -> Case:
    """Build one phantom; a pure function of (config, seed)."""
    geo = _geometry(cfg, rng_for(seed, "geometry"))
    ct = _ct_texture(geo, cfg, rng_for(seed, "texture"))
    dose = analytic_dose(geo, cfg, rng_for(seed, "dose"))

    rings = ring_masks(geo["ptv"], cfg.ring_bands, geo["body"])
    for i, ring in enumerate(rings, start=1):
        if not ring.any():
            raise PhantomError(f"geometry infeasible: ring {i} is empty")

    masks = {"PTV": geo["ptv"], "Bladder": geo["bladder"], "ST": geo["st"],
             "FHL": geo["fhl"], "FHR": geo["fhr"]}
    masks.update({name: ring for name, ring in zip(RING_NAMES, rings)})
    params = ground_truth_params(dose, masks, cfg, seed)

    meta = {
        "seed": int(seed),
        "grid": cfg.size,
        "prescription_gy": cfg.prescription_gy,
        "config_hash": cfg.config_hash(),
    }
    return Case(ct=ct, mask_ptv=geo["ptv"], mask_bladder=geo["bladder"],
                mask_st=geo["st"], mask_fhl=geo["fhl"], mask_fhr=geo["fhr"],
                rings=rings, dose=dose, params=params, meta=meta)
