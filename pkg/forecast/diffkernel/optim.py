"""Gradient-descent optimisers with global-norm clipping."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ConfigurationError, NumericalError
from .tape import Parameter

DEFAULT_CLIP_NORM = 10.0


def global_grad_norm(params: list[Parameter]) -> float:
    """Euclidean norm of all gradients taken together."""
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))


def check_finite_gradients(params: list[Parameter]) -> None:
    """Abort with the name of the first parameter holding a NaN or Inf gradient."""
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"Non-finite gradient in parameter '{p.name or '<unnamed>'}'")


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most `max_norm`; returns the norm before."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0.0:
        logging.debug(f"Clipping gradient norm {norm:.3g} to {max_norm}")
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Optimizer:
    """Shared step logic: finite check, clipping, update, gradient reset."""

    kind = "base"

    def __init__(self, params: list[Parameter], learning_rate: float, max_grad_norm: float | None = DEFAULT_CLIP_NORM):
        if learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.steps = 0

    def step(self) -> float:
        """Apply one update and clear the gradients; returns the pre-clip gradient norm."""
        check_finite_gradients(self.params)
        norm = (
            clip_grad_norm(self.params, self.max_grad_norm)
            if self.max_grad_norm is not None
            else global_grad_norm(self.params)
        )
        self.steps += 1
        self._update()
        for p in self.params:
            p.zero_grad()
        return norm

    def _update(self) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named optimizer buffers for checkpointing."""
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: int) -> None:
        """Restore buffers written by state_arrays."""
        self.steps = steps


class SGD(Optimizer):
    """Plain gradient descent."""

    kind = "sgd"

    def _update(self) -> None:
        for p in self.params:
            p.value -= self.learning_rate * p.grad


class Adam(Optimizer):
    """Adaptive-moment descent with bias correction."""

    kind = "adam"

    def __init__(
        self,
        params: list[Parameter],
        learning_rate: float = 1e-3,
        max_grad_norm: float | None = DEFAULT_CLIP_NORM,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        super().__init__(params, learning_rate, max_grad_norm)
        self.betas = betas
        self.eps = eps
        self.first = [np.zeros_like(p.value) for p in self.params]
        self.second = [np.zeros_like(p.value) for p in self.params]

    def _update(self) -> None:
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1**self.steps
        correction2 = 1.0 - beta2**self.steps
        for p, m, v in zip(self.params, self.first, self.second):
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad * p.grad
            p.value -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for p, m, v in zip(self.params, self.first, self.second):
            arrays[f"adam.first.{p.name}"] = m.copy()
            arrays[f"adam.second.{p.name}"] = v.copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: int) -> None:
        super().load_state_arrays(arrays, steps)
        self.first = [np.array(arrays[f"adam.first.{p.name}"], dtype=np.float64) for p in self.params]
        self.second = [np.array(arrays[f"adam.second.{p.name}"], dtype=np.float64) for p in self.params]


def sgd_step(params: list[Parameter], learning_rate: float, state: Optimizer | None = None) -> Optimizer:
    """Functional form of one descent step; creates a plain SGD state on first use."""
    if state is None:
        state = SGD(params, learning_rate)
    state.learning_rate = learning_rate
    state.step()
    return state
