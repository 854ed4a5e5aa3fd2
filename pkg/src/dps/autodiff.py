"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Ops append a record to a thread-local tape whenever one of their inputs
requires gradients; :func:`backward` replays the tape in reverse and then
clears it. Tensors are rank <= 3.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROFILES = {
    "test": (np.float64, True),
    "train": (np.float32, False),
}


class _State(threading.local):
    def __init__(self):
        self.tape: list = []
        self.grad_enabled = True
        self.dtype = np.float32
        self.check_finite = False


_state = _State()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def use_profile(name: str):
    """``"test"``: float64 with NaN/Inf checks after every op; ``"train"``: float32, unchecked."""
    dtype, check = PROFILES[name]
    old = _state.dtype, _state.check_finite
    _state.dtype, _state.check_finite = dtype, check
    try:
        yield
    finally:
        _state.dtype, _state.check_finite = old


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def clear_tape() -> None:
    _state.tape.clear()


def tape_length() -> int:
    return len(_state.tape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _state.dtype))
        if arr.ndim > 3:
            raise ShapeError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take(self, rows)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_state.dtype), requires_grad=True, name=name)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(out_data)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{op} produced non-finite values (input shapes {shapes})")
    out = Tensor(out_data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.append(_Record(op, out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _finish("relu", np.where(on, x.data, 0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _finish("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def cos(x: Tensor) -> Tensor:
    return _finish("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _finish("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``(..., k) @ (k, n)``; the right operand must be a matrix."""
    a, w = _pair(a, w)
    if w.ndim != 2 or a.ndim not in (1, 2, 3) or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {w.shape}")

    def backward(g):
        ga = g @ w.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gw = a2.T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return _finish("matmul", a.data @ w.data, (a, w), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``(B, n, k) @ (B, k, m)``."""
    a, b = _pair(a, b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    return _finish("bmm", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g))


# ---------------------------------------------------------------------------
# shape


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = [x for x in xs if isinstance(x, Tensor)]
    like = ts[0] if ts else None
    xs = [_as_tensor(x, like) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _finish("concat", np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def slice(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of shape {x.shape}")
    index = tuple(np.s_[start:stop] if i == ax else np.s_[:] for i in range(x.ndim))

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _finish("slice", x.data[index], (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    if out.ndim > 3:
        raise ShapeError(f"reshape: rank {out.ndim} exceeds 3")
    return _finish("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < -table.shape[0] or idx.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _finish("gather", table.data[idx], (table,), backward)


def take(x: Tensor, rows) -> Tensor:
    """Select along the first axis (any rank)."""
    rows = np.arange(x.shape[0])[rows] if not isinstance(rows, np.ndarray) else rows

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return _finish("take", x.data[rows], (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _finish("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


# ---------------------------------------------------------------------------
# attention helpers


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where entries are kept.

    Rows with every entry masked come out as zeros with zero gradient.
    """
    d = x.data
    if mask is None:
        mask = np.ones(d.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
    z = np.where(mask, d, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    e = np.exp(np.where(mask, d - top, -np.inf))
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finish("masked_softmax", out, (x,), backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or p <= 0:
        return x
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return _finish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(tape):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.dtype)
                if t.grad is None:
                    t.grad = gi.copy() if gi.base is not None else gi
                else:
                    t.grad = t.grad + gi
            # intermediate gradients are no longer needed once propagated
            if rec.out is not loss:
                rec.out.grad = None
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# optimisation and init


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps, weight_decay)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.state, self.params)
        self.zero_grad()


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray] | None = None) -> None:
    """One in-place update of ``params``; missing gradients count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, p in enumerate(params):
        g = grads[i] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if state.weight_decay:
            p.data -= (state.lr * state.weight_decay) * p.data
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def glorot_init(shape, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Uniform in ``+-sqrt(6 / (fan_in + fan_out))``."""
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or _state.dtype)
