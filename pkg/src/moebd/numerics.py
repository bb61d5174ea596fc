"""Tape-based reverse-mode gradients for the small layer set used by the pMoE model.

Arrays are plain numpy arrays (float32 for training).  A :class:`Tensor`
wraps one array and, when it takes part in a computation on an active
:class:`Tape`, the operation is recorded so that :meth:`Tape.backward` can
replay it in reverse order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.name or '?'}, shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of primitive operations.

    Each entry holds the output tensor and a closure mapping the output
    gradient to input-gradient contributions.  Gradients accumulate
    additively, so a parameter used twice receives the sum.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._ops.append((out, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.data.dtype)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self._ops.clear()


_active: list[Tape] = []


class recording:
    """Context manager making ``tape`` the active tape."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self) -> Tape:
        _active.append(self.tape)
        return self.tape

    def __exit__(self, *exc) -> None:
        _active.pop()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = bool(_active) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _active[-1].record(out, backward)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.data.shape).astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b, accumulate64: bool = False) -> Tensor:
    """Matrix product with numpy broadcasting over leading (stack) axes.

    ``accumulate64`` sums in float64 before rounding back to the input
    dtype, which makes the result independent of BLAS summation order.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}")
    if accumulate64:
        data = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(
            np.result_type(a.data, b.data)
        )
    else:
        data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _emit(data, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _emit(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _emit(data, (a, b), backward)


def relu(x) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = _wrap(x)
    pos = x.data > 0
    data = np.where(pos, x.data, np.zeros((), dtype=x.data.dtype))

    def backward(g):
        _accumulate(x, g * pos)

    return _emit(data, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _emit(p, (x,), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _emit(np.asarray(data), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _emit(data, (x,), backward)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range for {classes} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad.astype(logits.dtype, copy=False)


def cross_entropy(logits, labels) -> Tensor:
    """Tape-recorded :func:`softmax_cross_entropy`, returning a scalar tensor."""
    logits = _wrap(logits)
    loss, grad = softmax_cross_entropy(logits.data, labels)

    def backward(g):
        _accumulate(logits, grad * g)

    return _emit(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# optimisation and checking


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * g``; plain SGD, no momentum or weight decay."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    for p, g in zip(params, grads):
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` builds the scalar loss from ``params`` (which it must read by
    reference).  Parameters are promoted to float64 for the duration of the
    check.  ``analytic`` overrides the tape gradients, which lets callers
    verify that a corrupted gradient is caught.
    """
    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.zero_grad()
        if analytic is None:
            tape = Tape()
            with recording(tape):
                loss = f()
            tape.backward(loss)
            analytic = [p.grad.copy() for p in params]
        worst = 0.0
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            a = np.asarray(a, dtype=np.float64).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
                flat[i] = orig
                num = (up - down) / (2 * h)
                err = abs(a[i] - num) / max(1e-8, abs(a[i]) + abs(num))
                worst = max(worst, err)
        return worst
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.zero_grad()
