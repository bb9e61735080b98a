"""Regression losses for both training stages."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accumulate, _result, absolute, sub, tensor_sum


def huber_loss(pred: Tensor, target: Tensor, delta: float = 0.5) -> Tensor:
    """Mean over elements of the Huber penalty with threshold delta.

    Quadratic branch 0.5*r^2 for |r| < delta, linear branch
    delta*(|r| - 0.5*delta) otherwise, with r = target - pred. The two
    branches agree at |r| = delta, so the loss is C1 there.
    """
    if pred.shape != target.shape:
        raise ValueError(f"huber_loss: shapes {pred.shape} and {target.shape} differ")
    if delta <= 0:
        raise ValueError(f"huber_loss: delta must be positive, got {delta}")
    r = target.data - pred.data
    absr = np.abs(r)
    quad = absr < delta
    vals = np.where(quad, 0.5 * r * r, delta * (absr - 0.5 * delta))
    n = vals.size
    out = np.asarray(vals.sum(dtype=pred.dtype) / pred.dtype.type(n))

    def push(g):
        dr = np.where(quad, r, delta * np.sign(r)) * (g / n)
        _accumulate(pred, -dr)
        _accumulate(target, dr)

    return _result(out, (pred, target), push)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of absolute differences."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    return tensor_sum(absolute(sub(pred, target)))
