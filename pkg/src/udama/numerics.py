"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order. Every
primitive returns a new :class:`Tensor`; :meth:`Tape.backward` walks the
record once in reverse and accumulates gradients additively into the
``grad`` buffers of the inputs. Parameter gradients are never cleared by
the tape, so callers zero them between optimisation steps.

The primitive set is small on purpose: affine, sigmoid, tanh, softplus,
add, sub, mul, div, maximum-with-floor, concat, slice, mean, sum, log,
square, scale and gradient reversal.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from udama.errors import ConfigError, ContractViolation, DimensionError


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Tape:
    """Ordered record of primitive operations for one forward pass.

    With ``record=False`` the tape evaluates values only; nothing is kept
    and :meth:`backward` is unavailable. Inference uses this mode.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def _emit(self, value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        out = Tensor(value)
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._nodes.append((out, inputs, backward))
        return out

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Propagate ``d loss`` back through every recorded node exactly once."""
        if not self.record:
            raise ContractViolation("backward() on a non-recording tape")
        if loss.value.size != 1:
            raise ContractViolation(f"backward() needs a scalar, got shape {loss.shape}")
        loss.accumulate(np.full(loss.shape, seed))
        for out, inputs, fn in reversed(self._nodes):
            self.visits += 1
            if out.grad is None:
                continue
            fn(out.grad, *inputs)
        self._nodes.clear()

    # ------------------------------------------------------------------
    # linear algebra

    def affine(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        """``x @ W + b`` for ``x`` of shape (n, p), ``W`` (p, q), ``b`` (q,)."""
        if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
            raise DimensionError(f"affine: x{x.shape} incompatible with W{W.shape}")
        if b is not None and b.shape != (W.shape[1],):
            raise DimensionError(f"affine: bias{b.shape} incompatible with W{W.shape}")
        out = x.value @ W.value
        if b is not None:
            out = out + b.value

        def backward(g, x, W, b=None):
            if x.requires_grad:
                x.accumulate(g @ W.value.T)
            if W.requires_grad:
                W.accumulate(x.value.T @ g)
            if b is not None and b.requires_grad:
                b.accumulate(g.sum(axis=0))

        inputs = (x, W) if b is None else (x, W, b)
        return self._emit(out, inputs, backward)

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def sigmoid(self, x: Tensor) -> Tensor:
        s = expit(x.value)

        def backward(g, x):
            x.accumulate(g * s * (1.0 - s))

        return self._emit(s, (x,), backward)

    def tanh(self, x: Tensor) -> Tensor:
        t = np.tanh(x.value)

        def backward(g, x):
            x.accumulate(g * (1.0 - t * t))

        return self._emit(t, (x,), backward)

    def softplus(self, x: Tensor) -> Tensor:
        def backward(g, x):
            x.accumulate(g * expit(x.value))

        return self._emit(_softplus(x.value), (x,), backward)

    def log(self, x: Tensor) -> Tensor:
        if np.any(x.value <= 0):
            raise ContractViolation("log of a nonpositive value")

        def backward(g, x):
            x.accumulate(g / x.value)

        return self._emit(np.log(x.value), (x,), backward)

    def square(self, x: Tensor) -> Tensor:
        def backward(g, x):
            x.accumulate(2.0 * g * x.value)

        return self._emit(x.value * x.value, (x,), backward)

    def maximum(self, x: Tensor, floor: float) -> Tensor:
        """Elementwise ``max(x, floor)``; gradient passes where ``x > floor``."""
        keep = x.value > floor

        def backward(g, x):
            x.accumulate(np.where(keep, g, 0.0))

        return self._emit(np.where(keep, x.value, floor), (x,), backward)

    def scale(self, x: Tensor, c: float) -> Tensor:
        def backward(g, x):
            x.accumulate(g * c)

        return self._emit(x.value * c, (x,), backward)

    def reverse_gradient(self, x: Tensor, lam: float) -> Tensor:
        """Identity on values; multiplies the incoming gradient by ``-lam``."""
        if lam < 0:
            raise ConfigError(f"gradient reversal strength must be >= 0, got {lam}")

        def backward(g, x):
            x.accumulate(g * -lam)

        return self._emit(x.value, (x,), backward)

    # ------------------------------------------------------------------
    # binary elementwise ops (numpy broadcasting on the right operand)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        out = a.value + b.value

        def backward(g, a, b):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.shape))

        return self._emit(out, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        out = a.value - b.value

        def backward(g, a, b):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-g, b.shape))

        return self._emit(out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        out = a.value * b.value

        def backward(g, a, b):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g * b.value, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g * a.value, b.shape))

        return self._emit(out, (a, b), backward)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if np.any(b.value == 0):
            raise ContractViolation("division by zero")
        out = a.value / b.value

        def backward(g, a, b):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g / b.value, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(-g * out / b.value, b.shape))

        return self._emit(out, (a, b), backward)

    # ------------------------------------------------------------------
    # structural ops

    def concat(self, tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
        """Join tensors along ``axis``; all other dimensions must agree."""
        tensors = tuple(tensors)
        if not tensors:
            raise ContractViolation("concat of nothing")
        ndim = tensors[0].value.ndim
        axis = axis % ndim
        ref = tensors[0].shape
        for t in tensors[1:]:
            if t.value.ndim != ndim or any(
                d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
            ):
                raise DimensionError(
                    f"concat along axis {axis}: {ref} vs {t.shape}"
                )
        out = np.concatenate([t.value for t in tensors], axis=axis)
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def backward(g, *parts):
            index = [slice(None)] * ndim
            for t, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    index[axis] = slice(lo, hi)
                    t.accumulate(g[tuple(index)])

        return self._emit(out, tensors, backward)

    def slice(self, x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
        """Contiguous ``[start, stop)`` range of ``x`` along ``axis``."""
        n = x.shape[axis]
        if not 0 <= start < stop <= n:
            raise DimensionError(f"slice [{start}:{stop}) out of range for axis of length {n}")
        index = [slice(None)] * x.value.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def backward(g, x):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            x.grad[index] += g

        return self._emit(x.value[index], (x,), backward)

    def mean(self, x: Tensor) -> Tensor:
        """Mean over all elements, as a 0-d tensor."""
        n = x.value.size
        if n == 0:
            raise ContractViolation("mean of an empty tensor")

        def backward(g, x):
            x.accumulate(np.full(x.shape, g / n))

        return self._emit(np.asarray(x.value.mean()), (x,), backward)

    def sum(self, x: Tensor) -> Tensor:
        def backward(g, x):
            x.accumulate(np.full(x.shape, g))

        return self._emit(np.asarray(x.value.sum()), (x,), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def grad_check(
    f: Callable[[Tape, Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Compare reverse-mode and central-difference gradients of ``f`` at ``x``.

    ``f(tape, x)`` must build a scalar on ``tape``. Returns the largest
    per-coordinate relative error ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    base = x.value.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    tape = Tape()
    out = f(tape, probe)
    if out.value.size != 1:
        raise ContractViolation(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = f(Tape(record=False), Tensor(hi.reshape(base.shape))).item()
        f_lo = f(Tape(record=False), Tensor(lo.reshape(base.shape))).item()
        numeric[i] = (f_hi - f_lo) / (2.0 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
