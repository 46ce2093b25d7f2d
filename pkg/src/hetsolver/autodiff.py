"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Only the kernels the solver needs are provided. Each primitive computes its
value eagerly; when a :class:`Tape` is active and any input requires a
gradient, the primitive appends a vector-Jacobian closure to the tape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

LEAKY_SLOPE = 0.2
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered op record. Use as a context manager; tapes nest per thread."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFinite(f"{op} produced a non-finite value")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x, s) -> Tensor:
    """Multiply by a constant, a scalar tensor, or one factor per row."""
    x = as_tensor(x)
    if not isinstance(s, Tensor):
        c = float(s)
        return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")
    if s.ndim == 0 or s.shape == (1,):
        return mul(x, s.data.reshape(()) if not s.requires_grad else _as_scalar(s))
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"scale: factor {s.shape} for rows of {x.shape}")
    tail = (slice(None),) + (None,) * (x.ndim - 1)
    factor = s.data[tail]

    def vjp(g):
        gs = g * x.data
        return g * factor, gs.reshape(gs.shape[0], -1).sum(axis=1)

    return _emit(x.data * factor, (x, s), vjp, "scale")


def _as_scalar(s: Tensor) -> Tensor:
    return s if s.ndim == 0 else reshape(s, ())


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _emit(y, (x,), lambda g: (g / x.data,), "log")


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * d, (x,), lambda g: (g * d,), "leaky_relu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_SIGMOID_LO = float(np.nextafter(0.0, 1.0))
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Split by sign so neither branch overflows.
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # Keep the output strictly inside (0, 1) even where float64 saturates.
    y = np.clip(y, _SIGMOID_LO, _SIGMOID_HI)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


ACTIVATIONS = {"relu": relu, "tanh": tanh}


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _emit(a.data @ b.data, (a, b), vjp, "matmul")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeMismatch(f"concat: {err}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit(value, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def gather(x, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``; the backward pass scatter-adds into ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _emit(x.data[index], (x,), vjp, "gather")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Row-wise normalisation followed by an optional elementwise affine map."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("layer_norm expects a matrix")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gain_t = as_tensor(np.ones(d) if gain is None else gain)
    bias_t = as_tensor(np.zeros(d) if bias is None else bias)
    if gain_t.shape != (d,) or bias_t.shape != (d,):
        raise ShapeMismatch("layer_norm affine parameters must have the row width")

    def vjp(g):
        gx = g * gain_t.data
        dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(xhat * gain_t.data + bias_t.data, (x, gain_t, bias_t), vjp, "layer_norm")


# ---------------------------------------------------------------- segments


@dataclass(frozen=True, eq=False)
class Segments:
    """Sorted segment ids of ``length`` items grouped into ``count`` buckets."""

    ids: np.ndarray
    count: int
    starts: np.ndarray
    present: np.ndarray

    @classmethod
    def from_ids(cls, ids, count: int) -> "Segments":
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (np.any(np.diff(ids) < 0) or ids[0] < 0 or ids[-1] >= count):
            raise ShapeMismatch("segment ids must be sorted and within range")
        if ids.size == 0:
            starts = np.zeros(0, dtype=np.int64)
        else:
            starts = np.concatenate([[0], np.flatnonzero(np.diff(ids)) + 1])
        return cls(ids, int(count), starts, ids[starts])

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def _segsum(values: np.ndarray, seg: Segments) -> np.ndarray:
    out = np.zeros((seg.count,) + values.shape[1:])
    if seg.length:
        out[seg.present] = np.add.reduceat(values, seg.starts, axis=0)
    return out


def segment_sum(x, seg: Segments) -> Tensor:
    x = as_tensor(x)
    if x.shape[0] != seg.length:
        raise ShapeMismatch("segment_sum: one segment id per row required")
    return _emit(_segsum(x.data, seg), (x,), lambda g: (g[seg.ids],), "segment_sum")


def segment_softmax(x, seg: Segments) -> Tensor:
    """Softmax of a score vector within each segment."""
    x = as_tensor(x)
    if x.ndim != 1 or x.shape[0] != seg.length:
        raise ShapeMismatch("segment_softmax expects one score per segment item")
    if seg.length == 0:
        return _emit(x.data.copy(), (x,), lambda g: (g,), "segment_softmax")
    peak = np.zeros(seg.count)
    peak[seg.present] = np.maximum.reduceat(x.data, seg.starts)
    ex = np.exp(x.data - peak[seg.ids])
    y = ex / _segsum(ex, seg)[seg.ids]

    def vjp(g):
        return (y * (g - _segsum(g * y, seg)[seg.ids]),)

    return _emit(y, (x,), vjp, "segment_softmax")


# ---------------------------------------------------------------- losses & features


def mse_reduce(pred, target, mask=None) -> Tensor:
    """Mean squared error over the masked rows and all their channels."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_reduce: {pred.shape} vs {target.shape}")
    rows = np.ones(pred.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    w = rows.astype(np.float64).reshape((-1,) + (1,) * (pred.ndim - 1))
    per_row = int(np.prod(pred.shape[1:])) if pred.ndim > 1 else 1
    count = max(int(rows.sum()) * per_row, 1)
    diff = (pred.data - target.data) * w
    value = np.asarray((diff * diff).sum() / count)

    def vjp(g):
        gd = 2.0 * float(g) * diff / count
        return gd, -gd

    return _emit(value, (pred, target), vjp, "mse_reduce")


def sinusoid_embed(dt, dim: int, min_freq: float = 1.0, max_freq: float = 1000.0) -> Tensor:
    """[sin(w_k dt), cos(w_k dt)] with geometrically spaced w_k; a constant."""
    if dim % 2:
        raise ShapeMismatch("embedding dimension must be even")
    dt = np.atleast_1d(np.asarray(dt, dtype=np.float64))
    half = dim // 2
    freqs = min_freq * (max_freq / min_freq) ** (np.arange(half) / max(half - 1, 1))
    ang = dt[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))


# ---------------------------------------------------------------- backward


def grad(tape: Tape, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Records are visited in exact reverse order of recording. Tensors that
    the loss does not depend on receive zeros.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
    return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]
