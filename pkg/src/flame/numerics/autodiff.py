"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that need a
gradient while it is active. ``backward`` replays the records in reverse
order, so no graph sort is needed: the tape order already is a topological
order. Tensors built outside an active tape are plain constants.

Primitives are registered in ``PRIMITIVES`` so the test-suite can sweep every
one of them with a finite-difference check.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

PRIMITIVES: dict[str, Callable] = {}

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of ``(output, inputs, vjp)`` triples."""

    def __init__(self) -> None:
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape():
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


class Tensor:
    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # arithmetic on 0-d arrays yields numpy scalars; keep a real (writable) ndarray
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return take(self, idx)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """A trainable leaf."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None) -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append((out, tuple(inputs), vjp))
    return out


def primitive(fn: Callable) -> Callable:
    PRIMITIVES[fn.__name__] = fn
    return fn


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

@primitive
def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@primitive
def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


@primitive
def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@primitive
def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


@primitive
def neg(a) -> Tensor:
    a = tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


@primitive
def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


@primitive
def log(a) -> Tensor:
    a = tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


@primitive
def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


@primitive
def square(a) -> Tensor:
    a = tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


@primitive
def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


@primitive
def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


@primitive
def softplus(a) -> Tensor:
    a = tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _record(out, (a,), lambda g: (g * _sigmoid(x),))


_GELU_C = np.sqrt(2.0 / np.pi)


@primitive
def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------- reductions

@primitive
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------- linear algebra / shape

@primitive
def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def vjp(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = (ad * g[..., None]).reshape(-1, ad.shape[-1]).sum(axis=0) if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), vjp)


@primitive
def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


@primitive
def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


@primitive
def take(a, idx) -> Tensor:
    """Basic or advanced indexing; duplicate indices accumulate in the gradient."""
    a = tensor(a)

    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(a.shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), vjp)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


@primitive
def scatter_rows(a, rows, n: int) -> Tensor:
    """Place the rows of ``a`` at distinct positions ``rows`` of a zero array with ``n`` rows."""
    a = tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:])
    out[rows] = a.data
    return _record(out, (a,), lambda g: (g[rows],))


@primitive
def concat(parts, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([p.data for p in parts], axis=axis), parts,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


@primitive
def pad_time(a, before: int, after: int) -> Tensor:
    """Zero-pad axis -2 (the time axis of ``(..., L, d)`` sequences)."""
    a = tensor(a)
    width = [(0, 0)] * a.ndim
    width[-2] = (before, after)
    L = a.shape[-2]
    return _record(np.pad(a.data, width), (a,), lambda g: (g[..., before:before + L, :],))


# ---------------------------------------------------------------- normalizers / losses

@primitive
def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


@primitive
def masked_softmax(a, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    a = tensor(a)
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, a.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


@primitive
def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy for integer ``labels``."""
    logits = tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = take(lp, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


@primitive
def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all entries; ``targets`` is constant."""
    logits = tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    per = np.logaddexp(0.0, x) - y * x
    n = float(per.size)
    return _record(np.asarray(per.sum() / n), (logits,),
                   lambda g: (g * (_sigmoid(x) - y) / n,))


# ---------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to ``params``.

    Parameters the loss never touches get an exact zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
    return {p: np.asarray(grads.get(id(p), np.zeros_like(p.data))).reshape(p.shape)
            for p in params}


def value_and_grad(fn: Callable[..., Tensor], params: Sequence[Tensor], *args, **kwargs):
    """Evaluate ``fn(*args)`` on a fresh tape and return ``(loss_value, grads)``."""
    with Tape() as tape:
        loss = fn(*args, **kwargs)
    return float(loss.data), backward(tape, loss, params)
