"""Differentiable network primitives: convolution, pooling, normalization,
softmax and scaled dot-product attention. All spatial ops take a single
case laid out channels-first (C, H, W); token ops take (tokens, dim)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _accumulate, _result, add, matmul, mul, transpose


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, oh, ow), strides=(s0, s1, s2, s1 * stride, s2 * stride))
    return windows.reshape(c * k * k, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlate (C_in,H,W) with (C_out,C_in,k,k), zero padding."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {weight.shape}")
    if wc_in != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels, kernel expects {wc_in}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: spatial dims {(h, w)} smaller than kernel {k} after padding {padding}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, oh, ow)            # (C_in*k*k, oh*ow)
    wf = weight.data.reshape(c_out, c_in * k * k)
    out = wf @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def push(g):
        g2 = g.reshape(c_out, oh * ow)
        _accumulate(weight, (g2 @ cols.T).reshape(weight.data.shape))
        if bias is not None:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wf.T @ g2).reshape(c_in, k, k, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + (oh - 1) * stride + 1:stride,
                        j:j + (ow - 1) * stride + 1:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    return _result(out, parents, push)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: dims {(h, w)} not divisible by {size}")
    h2, w2 = h // size, w // size
    windows = x.data.reshape(c, h2, size, w2, size).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, size * size)
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]

    def push(g):
        dwin = np.zeros((c, h2, w2, size * size), dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=3)
        dx = dwin.reshape(c, h2, w2, size, size).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        _accumulate(x, dx)

    return _result(out, (x,), push)


def upsample_nearest2x(x: Tensor) -> Tensor:
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def push(g):
        _accumulate(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _result(out, (x,), push)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial field.

    Train mode uses the current statistics (biased variance) and folds
    them into the running buffers in place; eval mode reads the buffers.
    """
    c, h, w = x.shape
    if h * w < 1:
        raise ValueError("batch_norm2d needs at least one spatial element per channel")
    if training:
        mean = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean[:] = (1 - momentum) * running_mean + momentum * mean
        running_var[:] = (1 - momentum) * running_var + momentum * var
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def push(g):
        _accumulate(gamma, (g * xhat).sum(axis=(1, 2)))
        _accumulate(beta, g.sum(axis=(1, 2)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[:, None, None]
        if training:
            n = h * w
            dx = (inv[:, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(1, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True))
        else:
            dx = dxhat * inv[:, None, None]
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), push)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of (tokens, dim)."""
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def push(g):
        _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), push)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis; rows sum to one."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def push(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), push)


MASKED_LOGIT = -1e30


def attention(q: Tensor, k: Tensor, v: Tensor,
              key_mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention over (tokens, dim) operands.

    ``key_mask`` is a boolean keep-vector over keys; masked keys get a
    huge negative logit and therefore exactly zero weight.
    """
    if q.shape[-1] == 0:
        raise ValueError("attention: zero head dimension")
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ValueError(f"attention: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k)), 1.0 / float(np.sqrt(d)))
    if key_mask is not None:
        additive = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASKED_LOGIT)
        scores = add(scores, Tensor(additive[None, :].astype(q.dtype)))
    weights = softmax(scores)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out
