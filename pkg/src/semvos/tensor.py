"""Dense float64 tensors with reverse-mode autodiff.

Every array in the engine -- feature maps, tokens, queries, attention
weights, gradients -- lives in a ``Tensor``. Data is contiguous row-major
float64; each differentiable op records a backward closure so that
``Tensor.backward()`` can accumulate exact gradients into the leaves.

Design constraints:
  * gradients accumulate (``grad +=``); running backward twice over the
    same graph raises ``StateError`` to surface double-counting bugs,
  * broadcasting is limited to what elementwise add/mul need (bias and
    gating); everything else reshapes explicitly,
  * outputs are freshly allocated, so forward/backward over distinct
    graphs may run in parallel.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, StateError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording.

    Inside the block every op computes values only; nothing can be
    backpropagated. Inference uses this so long sequences do not retain
    their whole history.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A contiguous row-major float64 array plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Iterable["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result; records the tape edge only when needed."""
        parents = tuple(parents)
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs)
        if needs:
            out._parents = parents
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse sweep from this node, accumulating into leaf ``.grad``.

        A graph may be swept once; rebuilding the forward is the reset.
        """
        if not self.requires_grad:
            raise StateError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64, order="C")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in order:
            if node._consumed:
                raise StateError(
                    "backward() was already run through this graph; "
                    "rerun the forward pass before differentiating again")

        self.accumulate_grad(grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._consumed = True

    # -- elementwise arithmetic --------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data + other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        return Tensor.from_op(out_data, (a, b), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data * other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        return Tensor.from_op(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            a.accumulate_grad(-g)

        return Tensor.from_op(-self.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        out_data = self.data / other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor.from_op(out_data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)
        out_data = self.data ** e

        def backward(g):
            a.accumulate_grad(g * e * self.data ** (e - 1.0))

        return Tensor.from_op(out_data, (a,), backward)

    # -- reductions and shape moves ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                grad = np.broadcast_to(g, a.data.shape)
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                grad = np.broadcast_to(g, a.data.shape)
            a.accumulate_grad(np.asarray(grad, order="C"))

        return Tensor.from_op(np.asarray(out_data), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = self.data.reshape(shape)

        def backward(g):
            a.accumulate_grad(g.reshape(a.data.shape))

        return Tensor.from_op(np.asarray(out_data, order="C"), (a,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.data.ndim))[::-1]
        a = self
        inv = np.argsort(axes)

        def backward(g):
            a.accumulate_grad(np.asarray(g.transpose(inv), order="C"))

        return Tensor.from_op(np.asarray(self.data.transpose(axes), order="C"), (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        a = self
        out_data = self.data[index]

        def backward(g):
            grad = np.zeros_like(a.data)
            np.add.at(grad, index, g)
            a.accumulate_grad(grad)

        return Tensor.from_op(np.asarray(out_data, order="C"), (a,), backward)

    # -- pointwise nonlinearities --------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(self.data)

        def backward(g):
            a.accumulate_grad(g * out_data)

        return Tensor.from_op(out_data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a.accumulate_grad(g / a.data)

        return Tensor.from_op(np.log(self.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(self.data)

        def backward(g):
            a.accumulate_grad(g * 0.5 / out_data)

        return Tensor.from_op(out_data, (a,), backward)

    def relu(self) -> "Tensor":
        a = self
        mask = self.data > 0.0

        def backward(g):
            a.accumulate_grad(g * mask)

        return Tensor.from_op(self.data * mask, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        # split by sign to avoid overflow in exp
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                            np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))

        def backward(g):
            a.accumulate_grad(g * out_data * (1.0 - out_data))

        return Tensor.from_op(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the parts."""
    parts = tuple(tensors)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate_grad(np.asarray(g[tuple(sl)], order="C"))

    return Tensor.from_op(out_data, parts, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
