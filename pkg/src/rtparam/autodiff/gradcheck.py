"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad

REL_ERR_FLOOR = 1e-8


def gradcheck(fn, inputs, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued closure with central
    finite differences, element by element.

    Returns the maximum relative error, with denominator
    max(|analytic|, |numeric|, 1e-8). Run in float64: single precision
    drowns the differences in rounding noise.
    """
    inputs = list(inputs)
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ValueError("gradcheck closure must return a scalar")
    checked = [t for t in inputs if t.requires_grad]
    backward(loss, params=checked)
    analytic = [t.grad.copy() for t in checked]

    worst = 0.0
    with no_grad():
        for t, ana in zip(checked, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn(*inputs).item()
                flat[i] = orig - eps
                f_minus = fn(*inputs).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(ana_flat[i]), abs(numeric), REL_ERR_FLOOR)
                worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst


def make_input(rng: np.random.Generator, shape, scale: float = 1.0) -> Tensor:
    """Random float64 leaf for gradchecks."""
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)
