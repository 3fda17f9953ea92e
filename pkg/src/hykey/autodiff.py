"""Minimal dense-tensor reverse-mode automatic differentiation engine.

A :class:`Tensor` wraps a numpy array (float32 by default). Operations
executed while a :class:`Tape` is active are recorded, and
``Tape.backward`` replays them in reverse to populate ``grad`` buffers
with analytic derivatives. Without an active tape, operations are plain
numpy calls with no recording overhead, which is the evaluation path.

The engine deliberately implements only what the detection network and
its losses need: broadcasting arithmetic, reductions, matmul, basic
indexing, and a small set of activation/normalisation primitives. The
convolution/pooling/sampling operations live in :mod:`hykey.nnops`.
"""

from __future__ import annotations

import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "as_tensor",
    "concat",
    "stack",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "l2_normalize",
    "huber",
    "exp",
    "log",
    "sqrt",
    "clip",
    "zero_grads",
]


class NonFiniteError(FloatingPointError):
    """An operation that fails fast on NaN/inf received a non-finite input."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class ZeroNormWarning(RuntimeWarning):
    """l2_normalize met a zero-norm vector and emitted a zero vector."""


_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: "Tensor", inputs: tuple, backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations for one or more forward passes.

    A tape is confined to the thread that opened it. Backward traversal
    visits each recorded operation exactly once, in reverse order of
    recording, so replay is deterministic.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: "Tensor", inputs: tuple, backward: Callable) -> None:
        output.requires_grad = True
        output._tape = self
        self._nodes.append(_Node(output, inputs, backward))

    def backward(self, output: "Tensor") -> None:
        """Populate ``grad`` on every tensor that ``output`` depends on."""
        if output.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        output.grad = np.ones_like(output.data)
        for node in reversed(self._nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g


class Tensor:
    """Dense row-major array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    # make ndarray <op> Tensor defer to our reflected operators instead of
    # broadcasting the tensor into an object array
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, (np.ndarray, np.generic, Tensor)) and arr.dtype in (np.float32, np.float64)):
            # lists/scalars land on the default dtype; explicit float arrays keep theirs
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on a tape; nothing to differentiate")
        self._tape.backward(self)

    # -- arithmetic ----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- shape manipulation ---------------------------------------------
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _apply(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# broadcasting arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _apply((a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _apply((a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _apply((a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out_data / b.data, b.shape),
        )

    return _apply((a, b), out_data, backward)


def neg(a: Tensor) -> Tensor:
    return _apply((a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _apply((a,), a.data**p, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _apply((a, b), a.data @ b.data, backward)


# ---------------------------------------------------------------------------
# shape ops and indexing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _apply((a,), a.data.reshape(shape), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _apply((a,), a.data.transpose(axes), backward)


def take(a: Tensor, key) -> Tensor:
    """Numpy-style indexing (basic slices and integer-array fancy indexing)."""

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _apply((a,), a.data[key], backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _apply(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _apply(tuple(tensors), np.stack([t.data for t in tensors], axis=axis), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _apply((a,), a.data.sum(axis=axis, keepdims=keepdims), backward)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = 1.0 / float(count)

    def backward(g):
        return (_expand_reduced(g * inv, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _apply((a,), a.data.mean(axis=axis, keepdims=keepdims), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def _check_finite(a: Tensor, op: str) -> None:
    if not np.isfinite(a.data).all():
        raise NonFiniteError(f"{op} received non-finite input")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _apply((a,), out_data, backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _apply((a,), np.log(a.data), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return _apply((a,), out_data, backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return _apply((a,), np.clip(a.data, lo, hi), backward)


def relu(a: Tensor) -> Tensor:
    _check_finite(a, "relu")
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _apply((a,), np.maximum(a.data, 0), backward)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite(a, "sigmoid")
    # split by sign for overflow-free evaluation
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _apply((a,), out_data, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _apply((a,), out_data, backward)


def l2_normalize(a: Tensor, axis: int = -1, warn_on_zero: bool = True) -> Tensor:
    _check_finite(a, "l2_normalize")
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    zero = norm == 0
    if zero.any() and warn_on_zero:
        warnings.warn("l2_normalize met zero-norm vectors; emitted zeros", ZeroNormWarning)
    safe = np.where(zero, 1.0, norm)
    out_data = np.where(zero, 0.0, a.data / safe).astype(a.dtype, copy=False)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - out_data * dot) / safe).astype(a.dtype, copy=False),)

    return _apply((a,), out_data, backward)


def huber(a: Tensor, delta: float) -> Tensor:
    """Quadratic within ``delta`` of zero, linear beyond."""
    if delta <= 0:
        raise ValueError("huber delta must be > 0")
    _check_finite(a, "huber")
    absa = np.abs(a.data)
    quad = absa <= delta
    out_data = np.where(quad, 0.5 * a.data**2, delta * (absa - 0.5 * delta)).astype(a.dtype, copy=False)

    def backward(g):
        return ((g * np.where(quad, a.data, delta * np.sign(a.data))).astype(a.dtype, copy=False),)

    return _apply((a,), out_data, backward)
