"""Minimal reverse-mode autodiff over dense numpy arrays.

The kernel set is deliberately closed: matmul, add, elementwise mul/div,
layer norm, softmax, GELU, row lookup/scatter (embedding + MoE dispatch),
top-k selection, mean-squared-error, log, exp, sqrt, power, concatenate,
slicing, and the reshape/transpose/sum/mean plumbing needed to compose
losses. float64 is the default precision; float32 works but the tight
gradient-check tolerances assume 64-bit.

Numerically risky kernels (matmul, div, log, exp, sqrt, pow, gelu, softmax,
layer_norm, mse) validate their outputs and raise NumericError naming the
kernel. Pure data movement (add, mul, concat, slice, reshape, transpose)
cannot create non-finite values from finite inputs and is left unchecked.

Everything here is single-threaded and deterministic: same inputs, same
bits out.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "no_grad",
    "add",
    "mul",
    "sub",
    "neg",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "log",
    "exp",
    "sqrt",
    "pow_const",
    "gelu",
    "softmax",
    "layer_norm",
    "take_rows",
    "put_rows",
    "topk_indices",
    "concat",
    "mse",
]


class DimensionError(ValueError):
    """Shapes handed to a kernel are inconsistent."""


class NumericError(ArithmeticError):
    """A kernel produced a non-finite value."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense float array plus an optional backward edge into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar over the kernel functions; python scalars adopt the
    # tensor's dtype so float32 graphs stay float32
    def __add__(self, other):
        return add(self, _ensure(other, self))

    def __radd__(self, other):
        return add(_ensure(other, self), self)

    def __mul__(self, other):
        return mul(self, _ensure(other, self))

    def __rmul__(self, other):
        return mul(_ensure(other, self), self)

    def __sub__(self, other):
        return sub(self, _ensure(other, self))

    def __rsub__(self, other):
        return sub(_ensure(other, self), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _ensure(other, self))

    def __rtruediv__(self, other):
        return div(_ensure(other, self), self)

    def __matmul__(self, other):
        return matmul(self, _ensure(other, self))

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _ensure(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add a gradient contribution. ``fresh`` marks arrays the caller
    allocated exclusively for this edge; shared or view arrays are copied so
    later in-place accumulation cannot corrupt a sibling's gradient."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_finite(data: np.ndarray, kernel: str) -> None:
    # single reduction, no temporaries: nan/inf poison the sum, and finite
    # activations at training scale cannot overflow it
    if not np.isfinite(data.sum()):
        raise NumericError(f"{kernel} produced non-finite values")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, fresh=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accum(b, gb, fresh=gb is not g)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, fresh=ga is not g)
        _accum(b, _unbroadcast(-g, b.shape), fresh=True)

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g, fresh=True)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    _check_finite(data, "div")

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape), fresh=True)
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape), fresh=True)

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.shape} @ {b.shape}"
        )
    # stacked @ 2-D collapses to one flat GEMM; the weight gradient then
    # needs no stacked temporary + reduction
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        data = a.data @ b.data
    _check_finite(data, "matmul")

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            _accum(a, (g2 @ b.data.T).reshape(a.shape), fresh=True)
            _accum(b, a2.T @ g2, fresh=True)
        else:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), fresh=True)
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), fresh=True)

    return _make(data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))  # view of g: not fresh

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        _accum(a, g.reshape(old))  # usually a view of g: not fresh

    return _make(a.data.reshape(shape), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    _check_finite(data, "log")

    def backward(g):
        _accum(a, g / a.data, fresh=True)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    _check_finite(data, "exp")

    def backward(g):
        _accum(a, g * data, fresh=True)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    _check_finite(data, "sqrt")

    def backward(g):
        _accum(a, g * 0.5 / data, fresh=True)

    return _make(data, (a,), backward)


def pow_const(a: Tensor, p: float) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = a.data**p
    _check_finite(data, "pow")

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1), fresh=True)

    return _make(data, (a,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (0.5 x (1 + tanh(c (x + 0.044715 x^3))))."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    data = 0.5 * x * (1.0 + t)
    _check_finite(data, "gelu")

    def backward(g):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner), fresh=True)

    return _make(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stabilized softmax (max subtracted before exponentiation)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = e / s
    _check_finite(data, "softmax")

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot), fresh=True)

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    _check_finite(data, "layer_norm")

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(x, gx, fresh=True)
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead), fresh=True)
        _accum(bias, g.sum(axis=lead), fresh=True)

    return _make(data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# data movement


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along the first axis (embedding lookup / MoE dispatch)."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, idx, g)
        _accum(a, gz, fresh=True)

    return _make(data, (a,), backward)


def put_rows(rows: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Scatter-add rows into a zero (n, ...) tensor (MoE combine)."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n,) + rows.shape[1:], dtype=rows.dtype)
    np.add.at(data, idx, rows.data)

    def backward(g):
        _accum(rows, g[idx], fresh=True)  # fancy indexing copies

    return _make(data, (rows,), backward)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis.

    Ties resolve to the lowest index (stable sort on negated scores), which
    pins routing behaviour for tests. Selection is not differentiable.
    """
    if k < 1 or k > scores.shape[-1]:
        raise DimensionError(f"top-k k={k} out of range for {scores.shape}")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            _accum(t, g[tuple(key)])

    return _make(data, tensors, backward)


def _getitem(a: Tensor, key) -> Tensor:
    # basic indexing only (ints/slices); advanced indexing goes via take_rows
    data = a.data[key]

    def backward(g):
        gz = np.zeros_like(a.data)
        gz[key] = g
        _accum(a, gz, fresh=True)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all entries of the squared difference."""
    tdata = target.data if isinstance(target, Tensor) else _as_float_array(target)
    if pred.shape != tdata.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {tdata.shape}")
    d = pred.data - tdata
    data = np.asarray((d * d).mean())
    _check_finite(data, "mse")
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        scale = 2.0 / d.size
        _accum(pred, g * scale * d, fresh=True)
        if isinstance(target, Tensor):
            _accum(target, -g * scale * d, fresh=True)

    return _make(data, parents, backward)
