"""Tensors, parameters and the computation tape."""

from __future__ import annotations

import threading
from typing import Any, Callable, Sequence

import numpy as np

from ..errors import TapeError

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def current_tape() -> Tape | None:
    """Innermost active tape of this thread, if any."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 1000.0

    def __init__(self, value: Any, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: VJP | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the underlying array."""
        return self.value.shape

    @property
    def ndim(self) -> int:
        """Number of array dimensions."""
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.value

    def accumulate(self, grad: np.ndarray) -> None:
        """Add an incoming gradient contribution."""
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operators delegate to forecast.diffkernel.ops.
    def __add__(self, other: Any) -> Tensor:
        return ops.add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return ops.add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return ops.sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return ops.mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return ops.mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return ops.div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return ops.div(other, self)

    def __neg__(self) -> Tensor:
        return ops.neg(self)

    def __matmul__(self, other: Any) -> Tensor:
        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return ops.index(self, index)


class Parameter(Tensor):
    """A named leaf tensor whose gradient buffer always matches its values."""

    def __init__(self, values: Any, name: str = ""):
        super().__init__(values, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        """Reset the gradient buffer in place."""
        if self.grad is None or self.grad.shape != self.value.shape:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad.fill(0.0)

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad


class Tape:
    """Ordered record of the differentiable operations executed while active.

    Use as a context manager; operations on tensors that require gradients are
    recorded in creation order, which is a valid topological order, so
    `backward` simply walks the record in reverse. A tape can be consumed once.
    """

    def __init__(self) -> None:
        self.records: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor) -> None:
        """Append a freshly computed tensor."""
        if self.consumed:
            raise TapeError("Cannot record on a tape that has already been consumed")
        self.records.append(out)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate gradients from `root` to every reachable tensor."""
        if self.consumed:
            raise TapeError("Tape already consumed by a backward pass")
        self.consumed = True
        if not root.requires_grad:
            raise TapeError("Root tensor is not connected to any parameter")
        root.accumulate(np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64))

        for node in reversed(self.records):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, grad in zip(node.parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent.accumulate(grad)
            # Intermediate buffers are not needed after their contribution is pushed.
            node.grad = None
            node.vjp = None
            node.parents = ()
        self.records.clear()


# pylint: disable=wrong-import-position
from . import ops  # noqa: E402
