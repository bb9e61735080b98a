"""Test-set evaluation: dose metrics, parameter errors, reports.

Per test case this computes V40/V50/Dmean/Dmax/CI/HI on the predicted
and ground-truth dose (over the target volume), the per-parameter
absolute errors against the ground-truth table, and DVH curves for
external plotting. Aggregates are plain means and standard deviations
so they can be recomputed from the per-case rows.
"""
from __future__ import annotations

import io
import json
import os

import numpy as np

from .autodiff import Tensor, no_grad
from .caseio import Case, read_case, read_dataset_meta, split_case_dirs
from .dosenet import DoseNetConfig
from .dosimetry import (
    conformity_index,
    d_stats,
    dvh,
    homogeneity_index,
    mad,
    paired_t_test,
    param_abs_err,
    v_at,
)
from .paramnet import ParamNetConfig
from .training import (
    TrainConfig,
    build_id,
    load_stage1,
    load_stage2,
    predict_dose_norm,
    stage2_input,
)
from .util import atomic_write_text, canonical_json

DOSE_METRICS = ("v40", "v50", "dmean", "dmax", "ci", "hi")


def dose_metrics(dose_gy: np.ndarray, case: Case, prescription: float,
                 isodose_pct: float = 100.0, hi_formula: str = "dmax") -> dict[str, float]:
    ptv = case.mask_ptv
    dmean, dmax = d_stats(dose_gy, ptv)
    return {
        "v40": v_at(dose_gy, ptv, 40.0),
        "v50": v_at(dose_gy, ptv, 50.0),
        "dmean": dmean,
        "dmax": dmax,
        "ci": conformity_index(dose_gy, ptv, prescription, isodose_pct),
        "hi": homogeneity_index(dose_gy, ptv, prescription, hi_formula),
    }


def predict_case(dose_net, param_net, case: Case, prescription: float):
    """(predicted dose in Gy, predicted parameter table)."""
    dose_norm = predict_dose_norm(dose_net, case)
    with no_grad():
        pred = param_net(Tensor(stage2_input(case, dose_norm)), case.structure_masks())
    return dose_norm * prescription, pred.to_table(prescription)


def _dvh_csv(curve) -> str:
    out = io.StringIO()
    out.write("dose_gy,fraction\n")
    for d, f in zip(curve.dose_axis(), curve.fractions):
        out.write(f"{d:.4f},{f:.8f}\n")
    return out.getvalue()


def evaluate_run(dataset_dir: str, stage1_path: str, stage2_path: str, out_dir: str,
                 tcfg: TrainConfig | None = None,
                 dnet_cfg: DoseNetConfig | None = None,
                 pnet_cfg: ParamNetConfig | None = None,
                 isodose_pct: float = 100.0, hi_formula: str = "dmax",
                 compare_report: str | None = None,
                 write_dvh: bool = True) -> dict:
    tcfg = tcfg or TrainConfig()
    os.makedirs(out_dir, exist_ok=True)
    meta = read_dataset_meta(dataset_dir)
    dp = float(meta["prescription_gy"])
    dnet_cfg = dnet_cfg or DoseNetConfig(image_size=int(meta["size"]))
    dose_net = load_stage1(stage1_path, dnet_cfg)
    param_net = load_stage2(stage2_path, pnet_cfg)

    _, test_dirs = split_case_dirs(dataset_dir)
    if not test_dirs:
        raise ValueError(f"{dataset_dir}: empty test split")

    per_case = []
    for directory in test_dirs:
        case = read_case(directory)
        case_id = os.path.basename(directory)
        pred_dose, pred_table = predict_case(dose_net, param_net, case, dp)
        row = {
            "case": case_id,
            "pred": dose_metrics(pred_dose, case, dp, isodose_pct, hi_formula),
            "gt": dose_metrics(case.dose, case, dp, isodose_pct, hi_formula),
            "param_abs_err": param_abs_err(pred_table, case.params),
        }
        per_case.append(row)
        if write_dvh:
            dvh_dir = os.path.join(out_dir, "dvh", case_id)
            for name, mask in {"PTV": case.mask_ptv, **case.oar_masks()}.items():
                atomic_write_text(os.path.join(dvh_dir, f"{name}_pred.csv"),
                                  _dvh_csv(dvh(pred_dose, mask, structure=name)))
                atomic_write_text(os.path.join(dvh_dir, f"{name}_gt.csv"),
                                  _dvh_csv(dvh(case.dose, mask, structure=name)))

    aggregates = {}
    for metric in DOSE_METRICS:
        pred_series = [row["pred"][metric] for row in per_case]
        gt_series = [row["gt"][metric] for row in per_case]
        aggregates[metric] = {
            "pred_mean": float(np.mean(pred_series)),
            "pred_std": float(np.std(pred_series)),
            "gt_mean": float(np.mean(gt_series)),
            "gt_std": float(np.std(gt_series)),
            "mad": mad(pred_series, gt_series),
        }

    param_mean: dict[str, dict[str, float]] = {}
    for i, err_row in enumerate(per_case[0]["param_abs_err"]):
        structure = err_row["structure"]
        fields = {}
        for fieldname in ("weight", "volume", "dose"):
            if fieldname in err_row:
                series = [row["param_abs_err"][i][fieldname] for row in per_case]
                fields[fieldname] = float(np.mean(series))
        param_mean[structure] = fields

    report = {
        "build_id": build_id(tcfg),
        "config": tcfg.to_dict(),
        "eval": {"isodose_pct": isodose_pct, "hi_formula": hi_formula},
        "n_test_cases": len(per_case),
        "per_case": per_case,
        "dose_aggregates": aggregates,
        "param_abs_err_mean": param_mean,
    }

    if compare_report is not None:
        with open(compare_report, "r", encoding="utf-8") as fh:
            other = json.load(fh)
        report["compare"] = compare_runs(report, other)

    atomic_write_text(os.path.join(out_dir, "per_case.csv"), per_case_csv(per_case))
    atomic_write_text(os.path.join(out_dir, "report.json"), canonical_json(report))
    return report


def per_case_csv(per_case: list[dict]) -> str:
    out = io.StringIO()
    header = ["case"]
    header += [f"{m}_pred" for m in DOSE_METRICS] + [f"{m}_gt" for m in DOSE_METRICS]
    for err_row in per_case[0]["param_abs_err"]:
        for fieldname in ("weight", "volume", "dose"):
            if fieldname in err_row:
                header.append(f"{err_row['structure']}_{fieldname}_abs_err")
    out.write(",".join(header) + "\n")
    for row in per_case:
        cells = [row["case"]]
        cells += [f"{row['pred'][m]:.9g}" for m in DOSE_METRICS]
        cells += [f"{row['gt'][m]:.9g}" for m in DOSE_METRICS]
        for err_row in row["param_abs_err"]:
            for fieldname in ("weight", "volume", "dose"):
                if fieldname in err_row:
                    cells.append(f"{err_row[fieldname]:.9g}")
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def _error_series(report: dict) -> dict[str, list[float]]:
    """Per-case error series keyed by metric or structure/field."""
    series: dict[str, list[float]] = {}
    for metric in DOSE_METRICS:
        series[metric] = [abs(row["pred"][metric] - row["gt"][metric])
                          for row in report["per_case"]]
    for i, err_row in enumerate(report["per_case"][0]["param_abs_err"]):
        for fieldname in ("weight", "volume", "dose"):
            if fieldname in err_row:
                key = f"{err_row['structure']}/{fieldname}"
                series[key] = [row["param_abs_err"][i][fieldname]
                               for row in report["per_case"]]
    return series


def compare_runs(report_a: dict, report_b: dict) -> dict:
    """Paired t-tests between two runs' per-case error series."""
    cases_a = [row["case"] for row in report_a["per_case"]]
    cases_b = [row["case"] for row in report_b["per_case"]]
    if cases_a != cases_b:
        raise ValueError("compared runs evaluate different case sets")
    series_a = _error_series(report_a)
    series_b = _error_series(report_b)
    out = {}
    for key in series_a:
        if key not in series_b:
            continue
        if len(series_a[key]) < 2:
            continue
        result = paired_t_test(series_a[key], series_b[key])
        out[key] = {"t": result.t, "p": result.p, "dof": result.dof,
                    "degenerate": result.degenerate}
    return out
