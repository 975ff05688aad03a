"""Dense tensors and tape-based reverse-mode differentiation.

Only the handful of primitives the federation needs are provided.  A
:class:`Tape` records every primitive whose inputs depend on a watched leaf;
:func:`backward` replays the records in reverse and returns one gradient per
watched leaf.  Anything computed outside a tape, or from unwatched inputs, is
plain numpy and costs nothing extra.

Tensors are immutable: their buffers are marked read-only, and optimizers
return new tensors instead of updating in place.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericOverflowError",
    "TapeError",
    "precision",
    "backward",
    "sgd_momentum_step",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value in output")


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily change the float type used when building tensors.

    Everything defaults to float32.  Gradient checks switch to float64 so
    central differences are not swamped by rounding.
    """
    prev = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tensor:
    """Immutable n-dimensional float array."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=_dtype(), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    def __len__(self):
        return self.shape[0]

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitives applied to watched leaves.

    Use as a context manager; primitives executed inside the ``with`` block
    are recorded on the innermost active tape of the current thread.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self.leaves: list[Tensor] = []
        self._tracked: set[int] = set()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensors, got {type(t).__name__}")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self.leaves.append(t)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, op, inputs, out, grad_fn):
        self.records.append((op, inputs, out, grad_fn))
        self._tracked.add(id(out))

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in reverse order of entry")
        stack.pop()
        return False

    def gradient(self, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        return backward(self, loss, leaves)


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` with respect to watched leaves.

    Returns a mapping leaf -> gradient tensor of the leaf's shape.  Leaves the
    loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    wanted = list(tape.leaves if leaves is None else leaves)
    for leaf in wanted:
        if id(leaf) not in tape._tracked or not any(leaf is w for w in tape.leaves):
            raise TapeError(f"{leaf!r} is not a watched leaf of this tape")

    grads: dict[int, np.ndarray] = {}
    if tape.tracks(loss):
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.data.dtype)
    for op, inputs, out, grad_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = grad_fn(g)
        for x, gx in zip(inputs, in_grads):
            if gx is None or id(x) not in tape._tracked:
                continue
            if gx.shape != x.shape:
                raise ShapeError(op, gx.shape, x.shape, detail="gradient shape mismatch")
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx

    result = {}
    for leaf in wanted:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
        result[leaf] = Tensor._wrap(np.asarray(g, dtype=leaf.data.dtype))
    return result


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(op)
    t = Tensor._wrap(out)
    stack = _tapes()
    if stack:
        tape = stack[-1]
        if any(id(x) in tape._tracked for x in inputs):
            tape._record(op, tuple(inputs), t, grad_fn)
    return t


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if np.isscalar(a):
        return scale(b, a)
    if np.isscalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericOverflowError("div")
    return _emit(
        "div",
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, x.data.dtype.type(0))
    return _emit("relu", out, (x,), lambda g: (g * (x.data > 0),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def power(x, p: float) -> Tensor:
    """Elementwise ``x**p`` for ``x >= 0`` when ``p`` is fractional.

    Where the derivative is infinite (``x == 0`` and ``p < 1``) the
    subgradient 0 is used.
    """
    x = as_tensor(x)
    p = float(p)
    if p != int(p) and np.any(x.data < 0):
        raise ValueError("power: fractional exponent of a negative value")
    out = np.sqrt(x.data) if p == 0.5 else np.power(x.data, x.data.dtype.type(p))

    def grad(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, x.data.dtype.type(p - 1))
        d = np.where(np.isfinite(d), d, 0).astype(x.data.dtype)
        return (g * d,)

    return _emit("power", out, (x,), grad)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericOverflowError("log")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= lo
    return _emit(
        "clamp_min",
        np.maximum(x.data, x.data.dtype.type(lo)),
        (x,),
        lambda g: (g * keep,),
    )


def normalize_rows(x) -> Tensor:
    """Divide each row (last axis) by its sum."""
    x = as_tensor(x)
    total = x.data.sum(axis=-1, keepdims=True, dtype=np.float64)
    if np.any(total == 0):
        raise NumericOverflowError("normalize_rows")
    out = (x.data / total).astype(x.data.dtype)
    inv = (1.0 / total).astype(x.data.dtype)

    def grad(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * inv,)

    return _emit("normalize_rows", out, (x,), grad)


# ---------------------------------------------------------------- structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("flatten", x.shape)
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def grad(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _emit("concat", out, xs, grad)


def stack(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack", detail="no inputs")
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError("stack", *(x.shape for x in xs))
    out = np.stack([x.data for x in xs])
    return _emit("stack", out, xs, lambda g: tuple(g[i] for i in range(len(xs))))


def rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first axis."""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError("rows", x.shape, detail=f"slice {start}:{stop}")

    def grad(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _emit("rows", x.data[start:stop], (x,), grad)


def sort(x, axis: int = 0) -> Tensor:
    """Sort along ``axis``; gradients follow the sorting permutation."""
    x = as_tensor(x)
    order = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, order, axis=axis)

    def grad(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, order, g, axis=axis)
        return (full,)

    return _emit("sort", out, (x,), grad)


# ---------------------------------------------------------------- reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    total = np.sum(x.data, dtype=np.float64).astype(x.data.dtype)
    return _emit("sum", total, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def sum_over_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _emit("sum_over_axis", out, (x,), grad)


def mean_over_axis(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("mean_over_axis", x.shape, detail=f"axis {axis}")
    n = x.shape[axis]
    out = np.mean(x.data, axis=axis, dtype=np.float64).astype(x.data.dtype)

    def grad(g):
        g = np.expand_dims(g, axis) / x.data.dtype.type(n)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _emit("mean_over_axis", out, (x,), grad)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean", x.shape)
    n = x.size
    out = np.mean(x.data, dtype=np.float64).astype(x.data.dtype)
    return _emit(
        "mean",
        out,
        (x,),
        lambda g: (np.broadcast_to(g / x.data.dtype.type(n), x.shape).astype(x.data.dtype),),
    )


def squared_l2(x, y=None) -> Tensor:
    """``sum(x**2)``, or ``sum((x - y)**2)`` when ``y`` is given."""
    x = as_tensor(x)
    if y is None:
        total = np.sum(np.square(x.data, dtype=np.float64)).astype(x.data.dtype)
        return _emit("squared_l2", total, (x,), lambda g: (2 * g * x.data,))
    y = as_tensor(y)
    _same_shape("squared_l2", x, y)
    d = x.data.astype(np.float64) - y.data
    total = np.sum(d * d).astype(x.data.dtype)
    d = d.astype(x.data.dtype)
    return _emit("squared_l2", total, (x, y), lambda g: (2 * g * d, -2 * g * d))


def scalar_combine(scalars: Sequence, coeffs: Sequence[float]) -> Tensor:
    """Weighted sum ``sum_i coeffs[i] * scalars[i]`` of scalar tensors."""
    scalars = [as_tensor(s) for s in scalars]
    if len(scalars) != len(coeffs) or not scalars:
        raise ShapeError("scalar_combine", (len(scalars),), (len(coeffs),))
    for s in scalars:
        if s.size != 1:
            raise ShapeError("scalar_combine", s.shape, detail="inputs must be scalars")
    dtype = scalars[0].data.dtype
    total = sum(float(c) * float(s.data.reshape(())) for s, c in zip(scalars, coeffs))
    out = np.asarray(total, dtype=dtype)

    def grad(g):
        return tuple((g * dtype.type(c)).reshape(s.shape) for s, c in zip(scalars, coeffs))

    return _emit("scalar_combine", out, scalars, grad)


# ---------------------------------------------------------------- layers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _emit("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, b) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[1] != w.shape[1]:
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    out = x.data @ w.data.T + b.data
    return _emit(
        "affine",
        out,
        (x, w, b),
        lambda g: (g @ w.data, g.T @ x.data, g.sum(axis=0)),
    )


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (N, C, H+k-1, W+k-1) -> (N, C*k*k, H*W), row order (c, ki, kj)
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x, w, b) -> Tensor:
    """Stride-1 convolution with odd square kernels and same-size zero padding."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if (
        x.ndim != 4
        or w.ndim != 4
        or w.shape[1] != x.shape[1]
        or w.shape[2] != w.shape[3]
        or w.shape[2] % 2 == 0
        or b.shape != (w.shape[0],)
    ):
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    n, cin, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    pad = k // 2
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
    xp[:, :, pad : pad + h, pad : pad + wd] = x.data
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, h, wd) + b.data[:, None, None]

    def grad(g):
        g3 = g.reshape(n, cout, h * wd)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.matmul(wmat.T, g3).reshape(n, cin, k, k, h, wd)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + h, j : j + wd] += gcols[:, :, i, j]
        return gxp[:, :, pad : pad + h, pad : pad + wd], gw, gb

    return _emit("conv2d", out, (x, w, b), grad)


def avgpool2x2(x) -> Tensor:
    """2x2 average pooling, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("avgpool2x2", x.shape)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    d = x.data
    out = (d[:, :, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2] + d[:, :, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2]) + (
        d[:, :, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2] + d[:, :, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2]
    )
    out = out * d.dtype.type(0.25)

    def grad(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        q = g * g.dtype.type(0.25)
        for i in (0, 1):
            for j in (0, 1):
                full[:, :, i : 2 * h2 : 2, j : 2 * w2 : 2] = q
        return (full,)

    return _emit("avgpool2x2", out, (x,), grad)


# ---------------------------------------------------------------- softmax family


def _check_tau(op, tau):
    if not tau > 0:
        raise ValueError(f"{op}: temperature must be positive, got {tau}")


def softmax(x, tau: float = 1.0) -> Tensor:
    """Row-wise ``exp(z/tau) / sum exp(z/tau)`` over the last axis."""
    _check_tau("softmax_with_temperature", tau)
    x = as_tensor(x)
    z = x.data / x.data.dtype.type(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.data.dtype)

    def grad(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner) / x.data.dtype.type(tau),)

    return _emit("softmax_with_temperature", s, (x,), grad)


def log_softmax(x, tau: float = 1.0) -> Tensor:
    _check_tau("log_softmax", tau)
    x = as_tensor(x)
    z = x.data.astype(np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = (z - lse).astype(x.data.dtype)
    s = np.exp(out.astype(np.float64)).astype(x.data.dtype)

    def grad(g):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / x.data.dtype.type(tau),)

    return _emit("log_softmax", out, (x,), grad)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] == 0:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = np.asarray(np.mean(lse - picked), dtype=logits.data.dtype)
    probs = np.exp(z - lse[:, None])

    def grad(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g) / n)).astype(logits.data.dtype),)

    return _emit("cross_entropy", loss, (logits,), grad)


# ---------------------------------------------------------------- optimizer


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Mapping[Tensor, Tensor] | Sequence[Tensor],
    lr: float,
    momentum: float = 0.9,
    velocity: Sequence[np.ndarray] | None = None,
) -> tuple[list[Tensor], list[np.ndarray]]:
    """One heavy-ball step: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    Returns fresh parameter tensors and the new velocity buffers; the inputs
    are left untouched.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if isinstance(grads, Mapping):
        gs = [grads[p].data for p in params]
    else:
        gs = [as_tensor(g).data for g in grads]
    if len(gs) != len(params):
        raise ShapeError("sgd_momentum_step", (len(params),), (len(gs),))
    if velocity is None:
        velocity = [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
    new_params, new_vel = [], []
    for p, g, v in zip(params, gs, velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError("sgd_momentum_step", p.shape, g.shape, v.shape)
        dt = p.data.dtype.type
        v = dt(momentum) * v + g
        new_vel.append(v.astype(p.data.dtype))
        new_params.append(Tensor._wrap((p.data - dt(lr) * v).astype(p.data.dtype)))
    return new_params, new_vel
