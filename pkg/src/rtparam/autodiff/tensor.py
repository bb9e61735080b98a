"""Reverse-mode automatic differentiation on numpy arrays.

The tape is implicit: every tensor produced by an operation keeps
references to its parent tensors and a closure that pushes the upstream
gradient to them. ``backward`` walks that recorded graph once, in
reverse topological order, so each operation's backward rule runs
exactly once. A fresh forward pass builds a fresh tape; calling
``backward`` twice on the same loss node is an error.

Broadcasting is deliberately narrow: equal shapes, python scalars, or an
operand whose leading axis is missing or 1 (channel-style broadcast).
Anything fancier is a shape error, by design.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = False


def set_check_finite(flag: bool) -> None:
    """Verify every op output is finite (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            carried = getattr(data, "dtype", None)
            dtype = carried if carried in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def t(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self):
        backward(self)


def _result(data, parents, backward_fn):
    """Wrap an op output; record the tape edge when grad is live."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an operation")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if _CHECK_FINITE and not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient produced by an operation")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, params=None) -> None:
    """Run the recorded tape in reverse from a scalar loss.

    Fills ``grad`` on every reachable tensor that requires it. Tensors in
    ``params`` that the loss never touched get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran on this graph; run a fresh forward pass first")
    loss._backward_ran = True

    # iterative topological sort (graphs can be a few hundred nodes deep)
    topo = []
    visited = set()
    stack = [(loss, iter(loss._parents))]
    visited.add(id(loss))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _as_operand(x, like: Tensor):
    """Normalize the second operand of a binary op."""
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"mixed dtypes {like.dtype} and {x.dtype} in one graph")
        return x, False
    if isinstance(x, (int, float, np.floating, np.integer)):
        return x, True
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _broadcast_plan(sa, sb, opname):
    """How b's gradient folds back, or raise. Returns None | 'keep0' | 'drop0'."""
    if sa == sb:
        return None
    if len(sb) == len(sa) and len(sa) >= 1 and sb[0] == 1 and sb[1:] == sa[1:]:
        return "keep0"
    if len(sb) == len(sa) - 1 and sb == sa[1:]:
        return "drop0"
    raise ValueError(f"{opname}: shapes {sa} and {sb} are not compatible")


def _fold(g, plan):
    if plan is None:
        return g
    if plan == "keep0":
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=0)


def _binary(a: Tensor, b, opname, fwd, bwd_a, bwd_b):
    b, b_scalar = _as_operand(b, a)
    if b_scalar:
        data = fwd(a.data, b)

        def push(g):
            _accumulate(a, bwd_a(g, a.data, b))

        return _result(data, (a,), push)

    plan = _broadcast_plan(a.data.shape, b.data.shape, opname)
    data = fwd(a.data, b.data)

    def push(g):
        _accumulate(a, bwd_a(g, a.data, b.data))
        _accumulate(b, _fold(bwd_b(g, a.data, b.data), plan))

    return _result(data, (a, b), push)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0), (a,),
                   lambda g: _accumulate(a, g * mask))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,),
                   lambda g: _accumulate(a, g * sign))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise TypeError("matmul needs two tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul supports 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes {a.dtype} and {b.dtype} in one graph")
    data = a.data @ b.data

    def push(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), push)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape
    return _result(a.data.reshape(shape), (a,),
                   lambda g: _accumulate(a, g.reshape(orig)))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    sizes = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def push(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(data, tuple(tensors), push)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.data.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def push(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _result(a.data[idx].copy(), (a,), push)


def tensor_sum(a: Tensor) -> Tensor:
    data = a.data.sum(dtype=a.dtype)
    return _result(data, (a,),
                   lambda g: _accumulate(a, np.full_like(a.data, g)))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.sum(dtype=a.dtype) / a.dtype.type(n)
    return _result(data, (a,),
                   lambda g: _accumulate(a, np.full_like(a.data, g / n)))
