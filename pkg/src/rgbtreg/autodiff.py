"""Reverse-mode automatic differentiation on 64-bit numpy arrays.

A ``Graph`` is a tape of op records built while it is the active context.
``backward`` replays the tape once in reverse and accumulates gradients
into every leaf tensor created with ``requires_grad=True``.  Ops executed
outside any active graph run as plain numpy with no recording overhead.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError

_graph_stack: list["Graph"] = []
_finite_checks = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf screening of op outputs; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _finite_checks


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of op records; record order is a topological order."""

    def __init__(self):
        self.records: list[_OpRecord] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack.pop()
        if popped is not self:
            raise ContractError("graph contexts closed out of order")

    def __len__(self) -> int:
        return len(self.records)


def apply_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result, screen for non-finite values and record on the tape."""
    if _finite_checks and not np.all(np.isfinite(out_data)):
        raise NumericError(f"op '{name}' produced non-finite values")
    out = Tensor(out_data)
    if _graph_stack and any(t._tracked for t in inputs):
        out._tracked = True
        _graph_stack[-1].records.append(_OpRecord(name, tuple(inputs), out, backward_fn))
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each requires_grad leaf in the graph.

    Visits each record exactly once, in reverse tape order.  Records whose
    output received no gradient (dead branches) are skipped.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    table: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for rec in reversed(graph.records):
        entry = table.pop(id(rec.output), None)
        if entry is None:
            continue
        dy = entry[1]
        grads = rec.backward_fn(dy)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t._tracked:
                continue
            slot = table.get(id(t))
            if slot is None:
                table[id(t)] = [t, g]
            else:
                slot[1] = slot[1] + g
    for t, g in table.values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of its source."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(dy):
        return (_reduce_to_shape(dy, a.data.shape), _reduce_to_shape(dy, b.data.shape))

    return apply_op("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(dy):
        return (_reduce_to_shape(dy, a.data.shape), _reduce_to_shape(-dy, b.data.shape))

    return apply_op("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(dy):
        return (_reduce_to_shape(dy * bd, ad.shape), _reduce_to_shape(dy * ad, bd.shape))

    return apply_op("mul", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(dy):
        return (-dy,)

    return apply_op("neg", -a.data, (a,), bw)


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    sign = np.sign(a.data)

    def bw(dy):
        return (dy * sign,)

    return apply_op("abs", np.abs(a.data), (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi
    density = np.exp(-0.5 * x * x) * _INV_SQRT_2PI

    def bw(dy):
        return (dy * (phi + x * density),)

    return apply_op("gelu", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to 1."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(dy):
        dot = (dy * out).sum(axis=axis, keepdims=True)
        return (out * (dy - dot),)

    return apply_op("softmax", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(dy: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(dy, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            dy = np.expand_dims(dy, a)
    return np.broadcast_to(dy, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(dy):
        return (_expand_reduced(np.asarray(dy), shape, axis, keepdims).copy(),)

    return apply_op("sum", np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(dy):
        expanded = _expand_reduced(np.asarray(dy), shape, axis, keepdims)
        return (expanded / count,)

    return apply_op("mean", np.asarray(out), (a,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def bw(dy):
        return (dy.reshape(old),)

    return apply_op("reshape", a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bw(dy):
        return (dy.transpose(inverse),)

    return apply_op("transpose", a.data.transpose(axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(dy):
        return tuple(np.split(dy, splits, axis=axis))

    return apply_op("concat", out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# matrix multiply
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ContractError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def bw(dy):
            return (dy @ bd.T, ad.T @ dy)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ContractError(f"batched matmul dims differ: {ad.shape} @ {bd.shape}")
        out = ad @ bd

        def bw(dy):
            return (dy @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ dy)

    else:
        raise ContractError(
            f"matmul supports 2-D or batched 3-D operands, got {ad.ndim}-D @ {bd.ndim}-D"
        )
    return apply_op("matmul", out, (a, b), bw)
