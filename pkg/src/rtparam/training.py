"""Dataset generation and the two training stages.

Stage one fits the dose network with Huber loss on prescription-
normalized dose maps. Stage two freezes stage one, caches its predicted
dose per training case, and fits the parameter network with the summed
L1 objective. A "batch" of B cases is B per-case backward passes on
loss/B followed by one Adam step, which matches the per-case network
contracts while keeping the optimizer's batch granularity.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .autodiff import Adam, Tensor, backward, huber_loss, no_grad
from .caseio import (
    Case,
    read_case,
    read_dataset_meta,
    split_case_dirs,
    write_case,
    write_split,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .dosenet import DoseNet, DoseNetConfig
from .paramnet import (
    ParamNet,
    ParamNetConfig,
    normalized_targets,
    oar_loss,
    ring_loss,
    total_loss,
)
from .phantom import PhantomConfig, generate_case
from .util import (
    atomic_write_text,
    canonical_json,
    derive_seed,
    rng_for,
    sha256_file,
    sha256_text,
)


@dataclass
class TrainConfig:
    epochs: int = 60
    steps: int | None = None  # optional cap on optimizer steps
    batch_size: int = 4
    lr_stage1: float = 1e-5
    lr_stage2: float = 1e-4
    huber_delta: float = 0.5
    lambda_oars: float = 1.0
    seed: int = 0
    freeze_stage1: bool = True
    use_gt_dose: bool = False

    def __post_init__(self):
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_oars < 0:
            raise ValueError("lambda must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr_stage1": self.lr_stage1,
            "lr_stage2": self.lr_stage2,
            "huber_delta": self.huber_delta,
            "lambda": self.lambda_oars,
            "seed": self.seed,
            "freeze_stage1": self.freeze_stage1,
            "use_gt_dose": self.use_gt_dose,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_oars"] = d.pop("lambda")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))[:16]


def build_id(tcfg: TrainConfig) -> str:
    return f"rtparam-{__version__}+cfg.{tcfg.config_hash()}"


def generate_dataset(out_dir: str, n_cases: int, cfg: PhantomConfig, seed: int) -> dict:
    """N case directories plus split.json (80/20 by index) and dataset.json."""
    if n_cases < 2:
        raise ValueError(f"need at least 2 cases for a train/test split, got {n_cases}")
    os.makedirs(out_dir, exist_ok=True)
    for i in range(n_cases):
        case = generate_case(cfg, derive_seed(seed, i))
        write_case(case, os.path.join(out_dir, f"case_{i:04d}"))
    n_train = int(round(0.8 * n_cases))
    n_train = min(max(n_train, 1), n_cases - 1)
    train_ids = list(range(n_train))
    test_ids = list(range(n_train, n_cases))
    write_split(out_dir, train_ids, test_ids)
    meta = {
        "n_cases": n_cases,
        "seed": int(seed),
        "prescription_gy": cfg.prescription_gy,
        "size": cfg.size,
        "config_hash": cfg.config_hash(),
        "phantom": cfg.to_dict(),
    }
    atomic_write_text(os.path.join(out_dir, "dataset.json"), canonical_json(meta))
    return meta


def stage1_input(case: Case) -> np.ndarray:
    """Fixed assembly order: [ct, ptv, bladder, st, fhl, fhr]."""
    return np.stack([
        case.ct,
        case.mask_ptv,
        case.mask_bladder,
        case.mask_st,
        case.mask_fhl,
        case.mask_fhr,
    ]).astype(np.float32)


def stage2_input(case: Case, dose_norm: np.ndarray) -> np.ndarray:
    """Stage-one input plus a normalized dose channel."""
    return np.concatenate([stage1_input(case), dose_norm[None].astype(np.float32)])


def predict_dose_norm(net: DoseNet, case: Case) -> np.ndarray:
    """Eval-mode normalized dose prediction, detached."""
    was_training = net.training
    net.eval()
    with no_grad():
        pred = net(Tensor(stage1_input(case)))
    net.train(was_training)
    return pred.data[0].copy()


def load_stage1(path: str, cfg: DoseNetConfig | None = None) -> DoseNet:
    cfg = cfg or DoseNetConfig()
    net = DoseNet(cfg, rng_for(0, "stage1-shell"))
    net.load_state_dict(load_checkpoint(path))
    net.eval()
    return net


def load_stage2(path: str, cfg: ParamNetConfig | None = None) -> ParamNet:
    cfg = cfg or ParamNetConfig()
    net = ParamNet(cfg, rng_for(0, "stage2-shell"))
    net.load_state_dict(load_checkpoint(path))
    net.eval()
    return net


def _loss_csv(epoch_losses: list[tuple[int, float]]) -> str:
    out = io.StringIO()
    out.write("epoch,mean_loss\n")
    for epoch, loss in epoch_losses:
        out.write(f"{epoch},{loss:.8f}\n")
    return out.getvalue()


def _epoch_batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo:lo + batch_size]


def train_stage1(dataset_dir: str, out_dir: str, tcfg: TrainConfig,
                 net_cfg: DoseNetConfig | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    meta = read_dataset_meta(dataset_dir)
    train_dirs, _ = split_case_dirs(dataset_dir)
    cases = [read_case(d) for d in train_dirs]
    dp = float(meta["prescription_gy"])
    net_cfg = net_cfg or DoseNetConfig(image_size=int(meta["size"]))

    net = DoseNet(net_cfg, rng_for(tcfg.seed, "stage1-init"))
    opt = Adam(net.parameters(), lr=tcfg.lr_stage1)
    shuffle_rng = rng_for(tcfg.seed, "stage1-shuffle")

    inputs = [stage1_input(c) for c in cases]
    targets = [(c.dose / dp).astype(np.float32)[None] for c in cases]

    def case_loss(i: int) -> Tensor:
        pred = net(Tensor(inputs[i]))
        return huber_loss(pred, Tensor(targets[i]), delta=tcfg.huber_delta)

    with no_grad():
        initial = float(np.mean([case_loss(i).item() for i in range(len(cases))]))

    epoch_losses: list[tuple[int, float]] = []
    steps_done = 0
    stop = False
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(cases))
        losses = []
        for batch in _epoch_batches(order, tcfg.batch_size):
            opt.zero_grad()
            for i in batch:
                loss = case_loss(int(i))
                losses.append(loss.item())
                backward(loss * (1.0 / len(batch)))
            opt.step()
            steps_done += 1
            if tcfg.steps is not None and steps_done >= tcfg.steps:
                stop = True
                break
        epoch_losses.append((epoch, float(np.mean(losses))))
        if stop:
            break

    ckpt_path = os.path.join(out_dir, "stage1.rtck")
    save_checkpoint(ckpt_path, net.state_dict())
    atomic_write_text(os.path.join(out_dir, "loss_stage1.csv"), _loss_csv(epoch_losses))
    summary = {
        "build_id": build_id(tcfg),
        "config": tcfg.to_dict(),
        "net": {"kind": "dose", "use_transformer": net_cfg.use_transformer,
                "use_skips": net_cfg.use_skips, "channels": list(net_cfg.enc_channels)},
        "initial_loss": initial,
        "final_loss": epoch_losses[-1][1],
        "steps": steps_done,
        "checkpoint": "stage1.rtck",
    }
    atomic_write_text(os.path.join(out_dir, "train_stage1.json"), canonical_json(summary))
    return summary


def _param_field_errors(pred_table, gt_table) -> dict[str, list[float]]:
    """Absolute errors pooled by field class, natural units."""
    from .dosimetry import param_abs_err
    pools: dict[str, list[float]] = {"weight": [], "volume": [], "dose": []}
    for row in param_abs_err(pred_table, gt_table):
        for fieldname in pools:
            if fieldname in row:
                pools[fieldname].append(row[fieldname])
    return pools


def train_stage2(dataset_dir: str, stage1_path: str, out_dir: str, tcfg: TrainConfig,
                 pnet_cfg: ParamNetConfig | None = None,
                 dnet_cfg: DoseNetConfig | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    if not os.path.exists(stage1_path):
        raise FileNotFoundError(f"stage-one checkpoint not found: {stage1_path}")
    meta = read_dataset_meta(dataset_dir)
    dp = float(meta["prescription_gy"])
    train_dirs, _ = split_case_dirs(dataset_dir)
    cases = [read_case(d) for d in train_dirs]
    pnet_cfg = pnet_cfg or ParamNetConfig()
    dnet_cfg = dnet_cfg or DoseNetConfig(image_size=int(meta["size"]))

    hash_before = sha256_file(stage1_path)
    dose_net = load_stage1(stage1_path, dnet_cfg)

    # stage one is frozen, so its per-case prediction never changes: cache it
    if tcfg.use_gt_dose:
        dose_channels = [(c.dose / dp).astype(np.float32) for c in cases]
    else:
        dose_channels = [predict_dose_norm(dose_net, c) for c in cases]
    inputs = [stage2_input(c, d) for c, d in zip(cases, dose_channels)]
    gts = [normalized_targets(c.params) for c in cases]
    masks = [c.structure_masks() for c in cases]

    net = ParamNet(pnet_cfg, rng_for(tcfg.seed, "stage2-init"))
    opt = Adam(net.parameters(), lr=tcfg.lr_stage2)
    shuffle_rng = rng_for(tcfg.seed, "stage2-shuffle")

    def case_loss(i: int):
        pred = net(Tensor(inputs[i]), masks[i])
        rings_gt, oars_gt = gts[i]
        loss = total_loss(ring_loss(pred.rings, Tensor(rings_gt)),
                          oar_loss(pred.oars, Tensor(oars_gt)),
                          tcfg.lambda_oars)
        return loss, pred

    def field_mads() -> dict[str, float]:
        pools: dict[str, list[float]] = {"weight": [], "volume": [], "dose": []}
        with no_grad():
            for i, case in enumerate(cases):
                _, pred = case_loss(i)
                table = pred.to_table(dp)
                errs = _param_field_errors(table, case.params)
                for key in pools:
                    pools[key].extend(errs[key])
        return {k: float(np.mean(v)) for k, v in pools.items()}

    with no_grad():
        initial = float(np.mean([case_loss(i)[0].item() for i in range(len(cases))]))
    initial_mad = field_mads()

    epoch_losses: list[tuple[int, float]] = []
    steps_done = 0
    stop = False
    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(cases))
        losses = []
        for batch in _epoch_batches(order, tcfg.batch_size):
            opt.zero_grad()
            for i in batch:
                loss, _ = case_loss(int(i))
                losses.append(loss.item())
                backward(loss * (1.0 / len(batch)))
            opt.step()
            steps_done += 1
            if tcfg.steps is not None and steps_done >= tcfg.steps:
                stop = True
                break
        epoch_losses.append((epoch, float(np.mean(losses))))
        if stop:
            break

    final_mad = field_mads()
    hash_after = sha256_file(stage1_path)
    if hash_before != hash_after:
        raise RuntimeError("stage-one checkpoint changed during stage-two training")

    ckpt_path = os.path.join(out_dir, "stage2.rtck")
    save_checkpoint(ckpt_path, net.state_dict())
    atomic_write_text(os.path.join(out_dir, "loss_stage2.csv"), _loss_csv(epoch_losses))
    summary = {
        "build_id": build_id(tcfg),
        "config": tcfg.to_dict(),
        "net": {"kind": "param", "use_intra": pnet_cfg.use_intra, "use_inter": pnet_cfg.use_inter},
        "initial_loss": initial,
        "final_loss": epoch_losses[-1][1],
        "initial_param_mad": initial_mad,
        "final_param_mad": final_mad,
        "steps": steps_done,
        "stage1_hash_before": hash_before,
        "stage1_hash_after": hash_after,
        "checkpoint": "stage2.rtck",
    }
    atomic_write_text(os.path.join(out_dir, "train_stage2.json"), canonical_json(summary))
    return summary
