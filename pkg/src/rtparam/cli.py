"""Command-line entry point.

Subcommands: gen-data, train-stage1, train-stage2, eval, ablate,
predict. Every run is fully determined by its flags and seed. Failures
exit nonzero with a one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .ablation import run_ablation
from .caseio import read_case, write_raster
from .dosenet import DoseNetConfig
from .evaluation import evaluate_run, predict_case
from .phantom import PhantomConfig
from .training import (
    TrainConfig,
    generate_dataset,
    load_stage1,
    load_stage2,
    train_stage1,
    train_stage2,
)
from .util import atomic_write_text


def _load_config_overrides(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _train_config(args) -> TrainConfig:
    merged = TrainConfig().to_dict()
    merged.update(_load_config_overrides(getattr(args, "config", None)))
    for flag, key in (("epochs", "epochs"), ("steps", "steps"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("lam", "lambda")):
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "use_gt_dose", False):
        merged["use_gt_dose"] = True
    return TrainConfig.from_dict(merged)


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None, help="cap on optimizer steps")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    parser.add_argument("--config", default=None, help="JSON file overriding training defaults")


def cmd_gen_data(args) -> int:
    cfg = PhantomConfig(size=args.size, prescription_gy=args.dp)
    overrides = _load_config_overrides(args.config)
    if overrides:
        cfg = PhantomConfig(**{**cfg.to_dict(), **overrides})
    meta = generate_dataset(args.out, args.cases, cfg, args.seed)
    print(f"wrote {meta['n_cases']} cases to {args.out} "
          f"(size {meta['size']}, prescription {meta['prescription_gy']} Gy)")
    return 0


def cmd_train_stage1(args) -> int:
    tcfg = _train_config(args)
    summary = train_stage1(args.data, args.out, tcfg)
    print(f"stage one: loss {summary['initial_loss']:.6f} -> {summary['final_loss']:.6f} "
          f"in {summary['steps']} steps; checkpoint {os.path.join(args.out, 'stage1.rtck')}")
    return 0


def cmd_train_stage2(args) -> int:
    tcfg = _train_config(args)
    summary = train_stage2(args.data, args.stage1, args.out, tcfg)
    print(f"stage two: loss {summary['initial_loss']:.6f} -> {summary['final_loss']:.6f} "
          f"in {summary['steps']} steps; stage-one hash unchanged: "
          f"{summary['stage1_hash_before'] == summary['stage1_hash_after']}")
    return 0


def cmd_eval(args) -> int:
    tcfg = _train_config(args)
    report = evaluate_run(args.data, args.stage1, args.stage2, args.out, tcfg=tcfg,
                          isodose_pct=args.isodose_pct, hi_formula=args.hi_formula,
                          compare_report=args.compare)
    ci = report["dose_aggregates"]["ci"]
    hi = report["dose_aggregates"]["hi"]
    print(f"evaluated {report['n_test_cases']} test cases: "
          f"CI MAD {ci['mad']:.4f}, HI MAD {hi['mad']:.4f}; report in {args.out}")
    return 0


def cmd_ablate(args) -> int:
    tcfg = _train_config(args)
    report = run_ablation(args.data, args.variant, args.out, tcfg,
                          stage1_from=args.stage1_from)
    ring1 = report["param_abs_err_mean"]["Ring1"]
    print(f"variant {args.variant} complete: Ring1 |d| weight {ring1['weight']:.3f}%, "
          f"dose {ring1['dose']:.3f} Gy; table in {os.path.join(args.out, 'ablation_table.csv')}")
    return 0


def cmd_predict(args) -> int:
    case = read_case(args.case, require_dose=False)
    prescription = case.prescription
    dose_net = load_stage1(args.stage1, DoseNetConfig(image_size=case.ct.shape[0]))
    param_net = load_stage2(args.stage2)
    pred_dose, pred_table = predict_case(dose_net, param_net, case, prescription)
    os.makedirs(args.out, exist_ok=True)
    write_raster(os.path.join(args.out, "dose_pred.rtr1"), pred_dose.astype(np.float32))
    atomic_write_text(os.path.join(args.out, "params_pred.csv"), pred_table.to_csv())
    print(f"predicted dose and parameters written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtparam",
        description="dose map prediction and plan parameter regression on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset with an 80/20 split")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dp", type=float, default=50.4, help="prescription dose in Gy")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON overriding phantom defaults")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train the dose prediction network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the parameter regression network")
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True, help="stage-one checkpoint (frozen)")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", type=float, default=None, dest="lam",
                   help="weight of the OAR loss term")
    p.add_argument("--use-gt-dose", action="store_true",
                   help="train on ground-truth dose instead of the prediction")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="evaluate both stages on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--isodose-pct", type=float, default=100.0, dest="isodose_pct")
    p.add_argument("--hi-formula", choices=("dmax", "d2d98"), default="dmax", dest="hi_formula")
    p.add_argument("--compare", default=None, help="report.json of another run for paired t-tests")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True, choices=tuple("ABCDE"))
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-from", default=None, dest="stage1_from",
                   help="reuse a full-model stage-one checkpoint (variants B/C/D/E)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="predict dose and parameters for one case directory")
    p.add_argument("--case", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surfaced as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
