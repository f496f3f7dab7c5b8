"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Each forward pass records onto a fresh Tape (its recording order is already
topological); ``backward`` walks the tape in reverse once and then marks it
consumed. Ops executed with no live tape just compute values, which keeps
evaluation passes cheap and makes freezing semantics trivial: a parameter
with ``requires_grad=False`` never receives a gradient.

All data is float64 and every primitive checks its output for NaN/Inf.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Dense float64 tensor; a leaf when created directly by the caller."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_backward", "_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of one forward pass; consumed by a single backward."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


GradientMap = dict  # Tensor -> np.ndarray, same shape as the parameter

_TOUCHED: list[Tensor] | None = None


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and out.requires_grad:
        out._tape = tape
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.array(g, dtype=np.float64, copy=True)
        if _TOUCHED is not None:
            _TOUCHED.append(t)
    else:
        t._grad = t._grad + g


def _check_finite(arr: np.ndarray, opname: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output of {opname}")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check_finite(a.data + b.data, "add"),
                 requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check_finite(a.data - b.data, "sub"),
                 requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(_check_finite(a.data * b.data, "mul"),
                 requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(_check_finite(a.data * c, "scale"), requires_grad=a.requires_grad)

    def bwd(g):
        _accum(a, g * c)

    return _record(out, bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(_check_finite(a.data @ b.data, "matmul"),
                 requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, bwd)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = Tensor(_check_finite(y, "layer_norm"), requires_grad=x.requires_grad)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - y * gym))

    return _record(out, bwd)


def softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_check_finite(s, "softmax"), requires_grad=x.requires_grad)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, s * (g - dot))

    return _record(out, bwd)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(_check_finite(y, "log_softmax"), requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return _record(out, bwd)


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data / _SQRT2))
    out = Tensor(_check_finite(x.data * cdf, "gelu"), requires_grad=x.requires_grad)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _record(out, bwd)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, bwd)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes), requires_grad=x.requires_grad)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _record(out, bwd)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(_check_finite(x.data.mean(axis=axis), "mean"),
                 requires_grad=x.requires_grad)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(x, np.full(x.data.shape, g / count))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis) / count, x.data.shape))

    return _record(out, bwd)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(_check_finite(x.data.sum(axis=axis), "sum"),
                 requires_grad=x.requires_grad)

    def bwd(g):
        if axis is None:
            _accum(x, np.full(x.data.shape, g))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _record(out, bwd)


def take_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def bwd(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        _accum(table, acc)

    return _record(out, bwd)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Gradients of a scalar loss w.r.t. leaf parameters.

    With ``params`` given, the map has one entry per listed parameter
    (zeros for frozen or unreachable ones); otherwise it contains exactly
    the reachable leaves that require gradients. Consumes the tape.
    """
    global _TOUCHED
    if loss.data.shape != ():
        raise ShapeMismatchError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeConsumedError("loss was not produced on a live tape")
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward")
    tape.consumed = True

    touched: list[Tensor] = [loss]
    _TOUCHED = touched
    try:
        loss._grad = np.ones((), dtype=np.float64)
        for node in reversed(tape.nodes):
            if node._grad is not None and node._backward is not None:
                node._backward(node._grad)
    finally:
        _TOUCHED = None

    grads: GradientMap = {}
    if params is None:
        for t in touched:
            if t._backward is None and t.requires_grad and t._grad is not None:
                grads[t] = t._grad
    else:
        for p in params:
            if p.requires_grad and p._grad is not None:
                grads[p] = p._grad
            else:
                grads[p] = np.zeros_like(p.data)
    for t in touched:
        t._grad = None
    return grads


# ---------------------------------------------------------------------------
# testing oracle and per-sample gradients
# ---------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[], float], params: Sequence[Tensor],
                               eps: float = 1e-5) -> GradientMap:
    """Central-difference gradient estimate, every coordinate of every param.

    ``f`` re-evaluates the loss from the parameters' current values and must
    be deterministic for fixed values.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads: GradientMap = {}
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            g[i] = _central_diff(f, flat, i, eps)
        grads[p] = g.reshape(p.data.shape)
    return grads


def finite_difference_at(f: Callable[[], float], param: Tensor,
                         flat_indices: Sequence[int], eps: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat coordinates of one parameter."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = param.data.reshape(-1)
    return np.array([_central_diff(f, flat, int(i), eps) for i in flat_indices])


def _central_diff(f, flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    fp = float(f())
    flat[i] = orig - eps
    fm = float(f())
    flat[i] = orig
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NonFiniteError("non-finite loss during finite differencing")
    return (fp - fm) / (2.0 * eps)


def per_sample_gradients(loss_fn: Callable[[int], Tensor], batch_size: int,
                         params: Sequence[Tensor]) -> list[GradientMap]:
    """One GradientMap per sample, restricted to the given learnable params.

    ``loss_fn(b)`` must run the forward pass of sample ``b`` alone on a fresh
    tape and return its scalar loss.
    """
    if batch_size < 1:
        raise ValueError("batch must contain at least one sample")
    learnable = [p for p in params if p.requires_grad]
    if not learnable:
        raise ValueError("all parameters are frozen")
    maps = []
    for b in range(batch_size):
        with Tape():
            loss = loss_fn(b)
        maps.append(backward(loss, params=learnable))
    return maps
