"""Dense float64 arrays with a define-by-run reverse-mode differentiation tape.

Everything is stored in 64-bit floats. A :class:`Tape` is opened for one
forward pass, operations append nodes in execution order (which is therefore
a valid topological order), and :func:`backward` walks the record once in
reverse. Outside an active tape the same operations run as plain numpy,
which is how evaluation-mode forward passes avoid graph overhead.

A tape and the tensors recorded on it are confined to a single thread;
independent model instances may run in parallel threads or processes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray

_TLS = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Convenience operators; all defer to the module-level ops.
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data, name: str) -> Tensor:
    """A leaf tensor that accumulates gradients across backward passes."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction: every node's parents precede it. The tape is
    discarded after :func:`backward`; a new forward pass opens a new tape.
    """

    __slots__ = ("nodes", "_prev")

    def __init__(self):
        # Each node: (output tensor, [(parent, grad_fn), ...]) where grad_fn
        # maps the output gradient to that parent's gradient contribution.
        self.nodes: list[tuple[Tensor, list[tuple[Tensor, Callable[[Array], Array]]]]] = []

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _TLS.tape = self._prev
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _ensure(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out: Tensor, parent_fns: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    tracked = [(p, fn) for p, fn in parent_fns if p.requires_grad or p.tape is tape]
    if not tracked:
        return out
    out.tape = tape
    tape.nodes.append((out, tracked))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients accumulate (``+=``) into existing buffers, so callers zero
    parameter gradients between optimizer steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("loss was not produced by operations recorded on a tape")
    loss.grad = np.ones_like(loss.data)
    # Gradient buffers are only ever reassigned, never mutated in place, so
    # grad_fn results may alias their inputs without corrupting other nodes.
    for out, tracked in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        for parent, grad_fn in tracked:
            contrib = grad_fn(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` along axes numpy broadcast over."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.data + b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.data - b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.data * b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = Tensor(a.data / b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def neg(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(-a.data)
    return _record(out, [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics (leading axes broadcast)."""
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires operands with >= 2 dimensions, got {a.data.shape} x {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def grad_a(g: Array) -> Array:
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)

    def grad_b(g: Array) -> Array:
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)

    return _record(out, [(a, grad_a), (b, grad_b)])


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, [(a, lambda g: g * (a.data > 0.0))])


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, [(a, lambda g: g * (1.0 - out.data * out.data))])


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    x = a.data
    # Split by sign to avoid overflow in exp for large |x|.
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    out = Tensor(z)
    return _record(out, [(a, lambda g: g * out.data * (1.0 - out.data))])


def exp(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.exp(a.data))
    return _record(out, [(a, lambda g: g * out.data)])


def log(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.log(a.data))
    return _record(out, [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, [(a, lambda g: g * (0.5 / out.data))])


def square(a) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.data * a.data)
    return _record(out, [(a, lambda g: g * (2.0 * a.data))])


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through strictly inside (lo, hi)."""
    a = _ensure(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, [(a, lambda g: g * inside)])


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape
    return _record(out, [(a, lambda g: _expand_reduced(g, shape, axis, keepdims).copy())])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.data.shape
    count = a.data.size / out.data.size
    return _record(out, [(a, lambda g: _expand_reduced(g, shape, axis, keepdims) / count)])


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _record(out, [(a, lambda g: g.transpose(inverse))])


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    items = [_ensure(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in items], axis=axis))

    def make_grad(i: int):
        return lambda g: np.take(g, i, axis=axis)

    return _record(out, [(t, make_grad(i)) for i, t in enumerate(items)])


def take_index(a, index: int, axis: int) -> Tensor:
    """Select one index along ``axis`` (the axis is squeezed out)."""
    a = _ensure(a)
    out = Tensor(np.take(a.data, index, axis=axis))
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = index

    def grad_fn(g: Array) -> Array:
        full = np.zeros_like(a.data)
        full[tuple(slicer)] = g
        return full

    return _record(out, [(a, grad_fn)])


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------

def softmax_rows(x, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``exp(scale * x)`` over the last axis.

    The per-row maximum is subtracted before exponentiation, so saturated
    rows stay finite. Output rows sum to one and are strictly positive for
    finite input.
    """
    x = _ensure(x)
    if scale <= 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    scaled = scale * x.data
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def grad_fn(g: Array) -> Array:
        inner = (g * y).sum(axis=-1, keepdims=True)
        return scale * y * (g - inner)

    return _record(out, [(x, grad_fn)])


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    ``gain`` and ``bias`` broadcast against the last axis (shape ``(M,)``).
    """
    centered = sub(x, tmean(x, axis=-1, keepdims=True))
    variance = tmean(square(centered), axis=-1, keepdims=True)
    normalized = div(centered, sqrt(add(variance, eps)))
    return add(mul(normalized, gain), bias)


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale kept units by 1/(1-p).

    The Bernoulli mask is stored in the recorded node; evaluation mode is the
    identity.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    x = _ensure(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask)
    return _record(out, [(x, lambda g: g * mask)])


def im2col1d(x, kernel: int, pad: int) -> Tensor:
    """Unfold (B, C, T) into (B, T_out, C*kernel) patches with zero padding.

    With ``pad = kernel // 2`` and odd ``kernel`` the time length is
    preserved, which keeps same-padding convolutions exact.
    """
    x = _ensure(x)
    if x.ndim != 3:
        raise DimensionError(f"im2col1d expects (B, C, T), got {x.data.shape}")
    b, c, t = x.data.shape
    t_out = t + 2 * pad - kernel + 1
    if t_out < 1:
        raise DimensionError(f"kernel {kernel} too large for length {t} with pad {pad}")
    padded = np.zeros((b, c, t + 2 * pad))
    padded[:, :, pad:pad + t] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=2)
    out = Tensor(windows.transpose(0, 2, 1, 3).reshape(b, t_out, c * kernel))

    def grad_fn(g: Array) -> Array:
        gc = g.reshape(b, t_out, c, kernel).transpose(0, 2, 3, 1)
        gp = np.zeros((b, c, t + 2 * pad))
        for j in range(kernel):
            gp[:, :, j:j + t_out] += gc[:, :, j, :]
        return gp[:, :, pad:pad + t]

    return _record(out, [(x, grad_fn)])


def maxpool1d(x, size: int, stride: int) -> Tensor:
    """Max pooling over the last axis of (B, C, T); argmax is kept for backward."""
    x = _ensure(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool1d expects (B, C, T), got {x.data.shape}")
    b, c, t = x.data.shape
    t_out = (t - size) // stride + 1
    if t_out < 1:
        raise DimensionError(f"pool window {size} does not fit length {t}")
    span = stride * (t_out - 1) + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, size, axis=2)[:, :, ::stride, :]
    amax = windows.argmax(axis=3)
    out = Tensor(windows.max(axis=3))

    def grad_fn(g: Array) -> Array:
        gx = np.zeros_like(x.data)
        for j in range(size):
            view = gx[:, :, j:j + span:stride]
            view += np.where(amax == j, g, 0.0)
        return gx

    return _record(out, [(x, grad_fn)])
