"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs in float64: at desk scale precision is cheaper than speed
and it keeps finite-difference gradient checks tight. Ops record onto the
innermost active ``Tape``; code that runs outside any tape (evaluation,
data handling) pays no autograd overhead.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import InputError, InternalError, ShapeError

Array = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tape:
    """Op nodes in creation order; creation order is a topological order.

    The backward sweep walks the node list exactly once in reverse. A tape
    is single-use: calling backward() twice on it raises.
    """

    __slots__ = ("nodes", "used")

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise InternalError("tape stack corrupted")


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 value, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._tape: Tape | None = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            # The incoming array may alias another tensor's grad buffer;
            # defer ownership until a second contribution arrives.
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append((out, inputs, bwd))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum g over axes that numpy broadcasting expanded, back to shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics; both operands ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along axis; slices sum to 1 and are shift-invariant."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = Tensor(ls)

    def bwd(g):
        p = np.exp(ls)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def gelu(x) -> Tensor:
    """GELU with the tanh approximation (closed-form adjoint)."""
    x = as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t))

    def bwd(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape),)

    return _record(out, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // out.data.size

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.data.shape),)

    return _record(out, (x,), bwd)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), bwd)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _record(out, tuple(tensors), bwd)


def slice(x, index) -> Tensor:  # noqa: A001 - numpy-style name
    """Basic (non-fancy) indexing; gradient scatters back into place."""
    x = as_tensor(x)
    out = Tensor(x.data[index])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {logits.data.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.intp)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    out = Tensor(-log_probs[np.arange(n), labels].mean())

    def bwd(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _record(out, (logits,), bwd)


def kl_teacher_student(teacher_logits, student_logits, tau: float,
                       detach_teacher: bool = True) -> Tensor:
    """Mean KL(softmax(teacher/tau) || softmax(student/tau)) over the batch.

    With detach_teacher the teacher distribution is a constant: no gradient
    flows into teacher_logits through this term. There is no tau**2 loss
    rescaling.
    """
    teacher_logits = as_tensor(teacher_logits)
    student_logits = as_tensor(student_logits)
    if tau <= 0:
        raise InputError(f"temperature must be positive, got {tau}")
    if teacher_logits.data.shape != student_logits.data.shape:
        raise ShapeError(
            f"teacher/student shapes differ: "
            f"{teacher_logits.data.shape} vs {student_logits.data.shape}"
        )
    if teacher_logits.ndim != 2:
        raise ShapeError("kl_teacher_student expects (batch, classes) logits")
    n = teacher_logits.data.shape[0]

    def _log_probs(z):
        shifted = z / tau
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    log_p = _log_probs(teacher_logits.data)
    log_q = _log_probs(student_logits.data)
    p = np.exp(log_p)
    kl_rows = (p * (log_p - log_q)).sum(axis=1)
    out = Tensor(kl_rows.mean())

    def bwd(g):
        gt = gs = None
        if student_logits.requires_grad:
            gs = (np.exp(log_q) - p) * (g / (n * tau))
        if teacher_logits.requires_grad and not detach_teacher:
            gt = p * ((log_p - log_q) - kl_rows[:, None]) * (g / (n * tau))
        return gt, gs

    return _record(out, (teacher_logits, student_logits), bwd)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise InputError("loss was not recorded on an active tape")
    if tape.used:
        raise InputError("tape already consumed; backward called twice without reset")
    tape.used = True

    loss._accumulate(np.ones((), dtype=np.float64))
    for out, inputs, bwd in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = bwd(g)
        for t, gt in zip(inputs, grads):
            if gt is not None and t.requires_grad:
                t._accumulate(gt)
        # intermediate grads are never read again; free them eagerly
        out.grad = None
        out._grad_owned = False
