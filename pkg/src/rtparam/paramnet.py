"""Stage two: plan parameter regression.

Two full-resolution conv blocks fuse CT, masks and the predicted dose
into an integrated feature map. Each structure's slice of that map is
cut out by mask multiplication, summarized on a small grid restricted
to its bounding box, and sharpened by parameter-free self-attention
over the occupied grid cells. The target's pooled vector feeds a ring
regressor (5 rings x weight, dose); the four OAR vectors interact
through a two-layer GCN with learned edges before a shared linear head
emits (weight, volume, dose) per organ. All outputs are normalized:
percent / 100 and Gy / 100.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConvBNReLU,
    Linear,
    Module,
    Tensor,
    add,
    attention,
    concat,
    l1_loss,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
)
from .paramtable import (
    FUNCTION_MAX_DOSE,
    FUNCTION_MAX_DVH,
    OAR_NAMES,
    RING_NAMES,
    ParamRow,
    ParamTable,
)

WEIGHT_SCALE = 100.0
VOLUME_SCALE = 100.0
DOSE_SCALE = 100.0

REPORT_FLOOR = 0.01  # keeps exported tables inside the schema's (0, 100] bounds


@dataclass
class ParamNetConfig:
    in_channels: int = 7  # ct, ptv, 4 oars, predicted dose
    channels: int = 16
    grid: int = 8
    gcn_hidden: int = 64
    head_hidden: int = 64
    n_oars: int = 4
    n_rings: int = 5
    use_intra: bool = True
    use_inter: bool = True

    def __post_init__(self):
        if self.n_oars != 4 or self.n_rings != 5:
            raise ValueError("this pipeline is fixed at 4 OARs and 5 rings")

    @property
    def node_dim(self) -> int:
        """What the per-organ head consumes."""
        return self.gcn_hidden if self.use_inter else self.channels


def decouple(feature: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the feature map outside one structure's mask."""
    if feature.shape[1:] != mask.shape:
        raise ValueError(f"decouple: feature {feature.shape} vs mask {mask.shape}")
    return mul(feature, Tensor(np.asarray(mask, dtype=feature.dtype)[None, :, :]))


def grid_pool_matrix(mask: np.ndarray, grid: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooling matrix from pixels to grid cells over the mask's
    bounding box. Returns (matrix (g*g, H*W), occupancy (g*g,) bool);
    cells with no structure pixels stay all-zero rows."""
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("grid_pool_matrix: empty mask")
    h, w = mask.shape
    r0, r1 = rows.min(), rows.max()
    c0, c1 = cols.min(), cols.max()
    cell_r = (rows - r0) * grid // (r1 - r0 + 1)
    cell_c = (cols - c0) * grid // (c1 - c0 + 1)
    cells = cell_r * grid + cell_c
    counts = np.bincount(cells, minlength=grid * grid)
    pool = np.zeros((grid * grid, h * w), dtype=dtype)
    pool[cells, rows * w + cols] = 1.0 / counts[cells]
    return pool, counts > 0


def organ_summary(feature: Tensor, mask: np.ndarray, grid: int,
                  use_attention: bool = True) -> tuple[Tensor, Tensor]:
    """Summarize one organ's (masked) feature map.

    Pools onto a grid over the bounding box, runs self-attention across
    the occupied cells with a residual add (skipped when ablated), and
    masked-mean-pools the result. Returns (tokens (g*g, C), pooled (1, C)).
    """
    c = feature.shape[0]
    pool, occupied = grid_pool_matrix(mask, grid, feature.dtype)
    tokens = matmul(Tensor(pool), reshape(feature, c, -1).t())
    if use_attention:
        attended = attention(tokens, tokens, tokens, key_mask=occupied)
        keep = np.repeat(occupied[:, None], c, axis=1).astype(feature.dtype)
        tokens = add(tokens, mul(attended, Tensor(keep)))
    weights = (occupied / occupied.sum()).astype(feature.dtype)
    pooled = matmul(Tensor(weights[None, :]), tokens)
    return tokens, pooled


class OrganRelationGCN(Module):
    """Two graph-convolution layers over the OAR nodes with a learned,
    row-normalized adjacency mixed half-and-half with self-loops."""

    def __init__(self, n_nodes: int, in_dim: int, hidden: int, rng, dtype=np.float32):
        super().__init__()
        self.n_nodes = n_nodes
        self.edge_logits = Tensor(rng.standard_normal((n_nodes, n_nodes)) * 0.1,
                                  requires_grad=True, dtype=dtype)
        b1 = 1.0 / np.sqrt(in_dim)
        b2 = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-b1, b1, (in_dim, hidden)), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(rng.uniform(-b2, b2, (hidden, hidden)), requires_grad=True, dtype=dtype)

    def adjacency(self) -> Tensor:
        mixed = add(softmax(self.edge_logits),
                    Tensor(np.eye(self.n_nodes, dtype=self.edge_logits.dtype)))
        return mul(mixed, 0.5)

    def forward(self, nodes: Tensor) -> Tensor:
        if nodes.shape[0] != self.n_nodes:
            raise ValueError(f"expected {self.n_nodes} node vectors, got {nodes.shape[0]}")
        a = self.adjacency()
        h1 = relu(matmul(a, matmul(nodes, self.w1)))
        return matmul(a, matmul(h1, self.w2))

    __call__ = forward


class ParamNet(Module):
    def __init__(self, cfg: ParamNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.feat1 = ConvBNReLU(cfg.in_channels, cfg.channels, rng, dtype=dtype)
        self.feat2 = ConvBNReLU(cfg.channels, cfg.channels, rng, dtype=dtype)
        self.ring_fc1 = Linear(cfg.channels, cfg.head_hidden, rng, dtype=dtype)
        self.ring_fc2 = Linear(cfg.head_hidden, cfg.n_rings * 2, rng, dtype=dtype)
        if cfg.use_inter:
            self.gcn = OrganRelationGCN(cfg.n_oars, cfg.channels, cfg.gcn_hidden, rng, dtype=dtype)
        self.oar_head = Linear(cfg.node_dim, 3, rng, dtype=dtype)

    def integrated_feature(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[0]}")
        return self.feat2(self.feat1(x))

    def forward(self, x: Tensor, masks: dict[str, np.ndarray]) -> "ParamPrediction":
        cfg = self.cfg
        feature = self.integrated_feature(x)

        _, ptv_pooled = organ_summary(decouple(feature, masks["PTV"]), masks["PTV"],
                                      cfg.grid, use_attention=cfg.use_intra)
        rings = self.ring_fc2(relu(self.ring_fc1(ptv_pooled)))
        rings = reshape(rings, cfg.n_rings, 2)

        pooled = []
        for name in OAR_NAMES:
            _, vec = organ_summary(decouple(feature, masks[name]), masks[name],
                                   cfg.grid, use_attention=cfg.use_intra)
            pooled.append(vec)
        nodes = concat(pooled, axis=0)
        if cfg.use_inter:
            nodes = self.gcn(nodes)
        oars = self.oar_head(nodes)
        return ParamPrediction(rings=rings, oars=oars)

    __call__ = forward


@dataclass
class ParamPrediction:
    """Normalized network outputs with a natural-unit view for reports."""

    rings: Tensor  # (5, 2): weight, dose
    oars: Tensor   # (4, 3): weight, volume, dose

    def to_table(self, prescription_gy: float) -> ParamTable:
        """Clamped natural-unit table; the loss always uses the raw values."""
        rows = []
        ring_vals = self.rings.data
        for i, name in enumerate(RING_NAMES):
            weight = float(np.clip(ring_vals[i, 0] * WEIGHT_SCALE, REPORT_FLOOR, 100.0))
            dose = float(np.clip(ring_vals[i, 1] * DOSE_SCALE, REPORT_FLOOR, 2.0 * prescription_gy))
            rows.append(ParamRow(name, FUNCTION_MAX_DOSE, weight, None, dose))
        oar_vals = self.oars.data
        for i, name in enumerate(OAR_NAMES):
            weight = float(np.clip(oar_vals[i, 0] * WEIGHT_SCALE, REPORT_FLOOR, 100.0))
            volume = float(np.clip(oar_vals[i, 1] * VOLUME_SCALE, REPORT_FLOOR, 100.0))
            dose = float(np.clip(oar_vals[i, 2] * DOSE_SCALE, REPORT_FLOOR, 2.0 * prescription_gy))
            rows.append(ParamRow(name, FUNCTION_MAX_DVH, weight, volume, dose))
        return ParamTable(rows)


def normalized_targets(table: ParamTable, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth table -> normalized (rings (5,2), oars (4,3)) arrays."""
    rings = np.zeros((len(RING_NAMES), 2), dtype=dtype)
    for i, name in enumerate(RING_NAMES):
        row = table.row(name)
        rings[i] = (row.weight / WEIGHT_SCALE, row.dose / DOSE_SCALE)
    oars = np.zeros((len(OAR_NAMES), 3), dtype=dtype)
    for i, name in enumerate(OAR_NAMES):
        row = table.row(name)
        oars[i] = (row.weight / WEIGHT_SCALE, row.volume / VOLUME_SCALE, row.dose / DOSE_SCALE)
    return rings, oars


def ring_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum over the five rings of the L1 distance over (weight, dose)."""
    if pred.shape != (5, 2) or gt.shape != (5, 2):
        raise ValueError(f"ring loss expects (5, 2) pairs, got {pred.shape} and {gt.shape}")
    return l1_loss(pred, gt)


def oar_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum over the four OARs of the L1 distance over (weight, volume, dose)."""
    if pred.shape != (4, 3) or gt.shape != (4, 3):
        raise ValueError(f"OAR loss expects (4, 3) triples, got {pred.shape} and {gt.shape}")
    return l1_loss(pred, gt)


def total_loss(ring_term: Tensor, oar_term: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return add(ring_term, mul(oar_term, float(lam)))
