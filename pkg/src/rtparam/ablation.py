"""Ablation harness: five variants of the two-stage pipeline.

A drops the transformer bottleneck, B drops intra-organ attention,
C drops the organ-relation GCN, D drops both, E is the full model.
Each run trains its stages under the shared seed and emits a compact
CSV row mirroring the ablation table layout: stage-one CI/HI mean
absolute differences (only meaningful for A and E, whose stage one
differs) plus the Ring1 and Bladder parameter errors. B/C/D share E's
stage-one weights bit for bit under a fixed seed, so a prebuilt
checkpoint can be passed in instead of retraining it.
"""
from __future__ import annotations

import os
import shutil

from .dosenet import DoseNetConfig
from .evaluation import evaluate_run
from .paramnet import ParamNetConfig
from .training import TrainConfig, train_stage1, train_stage2
from .util import atomic_write_text, canonical_json

VARIANTS = {
    "A": {"use_transformer": False, "use_intra": True, "use_inter": True,
          "label": "without transformer bottleneck"},
    "B": {"use_transformer": True, "use_intra": False, "use_inter": True,
          "label": "without intra-organ attention"},
    "C": {"use_transformer": True, "use_intra": True, "use_inter": False,
          "label": "without organ-relation GCN"},
    "D": {"use_transformer": True, "use_intra": False, "use_inter": False,
          "label": "without intra-organ attention and organ-relation GCN"},
    "E": {"use_transformer": True, "use_intra": True, "use_inter": True,
          "label": "full model"},
}

TABLE_HEADER = ("variant,ci_mad,hi_mad,ring1_weight_abs_err,ring1_dose_abs_err,"
                "bladder_weight_abs_err,bladder_dose_abs_err,bladder_volume_abs_err")


def variant_configs(variant: str, image_size: int) -> tuple[DoseNetConfig, ParamNetConfig]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}, expected one of {sorted(VARIANTS)}")
    spec = VARIANTS[variant]
    dnet = DoseNetConfig(image_size=image_size, use_transformer=spec["use_transformer"])
    pnet = ParamNetConfig(use_intra=spec["use_intra"], use_inter=spec["use_inter"])
    return dnet, pnet


def table_row(variant: str, report: dict) -> str:
    """One ablation-table CSV line from an evaluation report."""
    stage_one_differs = variant in ("A", "E")
    ci = f"{report['dose_aggregates']['ci']['mad']:.6f}" if stage_one_differs else ""
    hi = f"{report['dose_aggregates']['hi']['mad']:.6f}" if stage_one_differs else ""
    ring1 = report["param_abs_err_mean"]["Ring1"]
    bladder = report["param_abs_err_mean"]["Bladder"]
    return (f"{variant},{ci},{hi},{ring1['weight']:.6f},{ring1['dose']:.6f},"
            f"{bladder['weight']:.6f},{bladder['dose']:.6f},{bladder['volume']:.6f}")


def run_ablation(dataset_dir: str, variant: str, out_dir: str, tcfg: TrainConfig,
                 stage1_from: str | None = None) -> dict:
    """Train and evaluate one variant; returns the evaluation report."""
    from .caseio import read_dataset_meta
    os.makedirs(out_dir, exist_ok=True)
    meta = read_dataset_meta(dataset_dir)
    dnet_cfg, pnet_cfg = variant_configs(variant, int(meta["size"]))

    stage1_path = os.path.join(out_dir, "stage1.rtck")
    if stage1_from is not None:
        if not dnet_cfg.use_transformer:
            raise ValueError("variant A trains its own stage one; --stage1-from only fits B/C/D/E")
        shutil.copyfile(stage1_from, stage1_path)
        stage1_summary = {"reused_from": os.path.basename(stage1_from)}
    else:
        stage1_summary = train_stage1(dataset_dir, out_dir, tcfg, net_cfg=dnet_cfg)

    stage2_summary = train_stage2(dataset_dir, stage1_path, out_dir, tcfg,
                                  pnet_cfg=pnet_cfg, dnet_cfg=dnet_cfg)
    report = evaluate_run(dataset_dir, stage1_path, os.path.join(out_dir, "stage2.rtck"),
                          out_dir, tcfg=tcfg, dnet_cfg=dnet_cfg, pnet_cfg=pnet_cfg,
                          write_dvh=False)

    atomic_write_text(os.path.join(out_dir, "ablation_table.csv"),
                      TABLE_HEADER + "\n" + table_row(variant, report) + "\n")
    summary = {
        "variant": variant,
        "label": VARIANTS[variant]["label"],
        "stage1": stage1_summary,
        "stage2": {k: stage2_summary[k] for k in
                   ("initial_loss", "final_loss", "initial_param_mad", "final_param_mad", "steps")},
    }
    atomic_write_text(os.path.join(out_dir, "ablation_summary.json"), canonical_json(summary))
    return report
