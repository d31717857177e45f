"""Shared fixtures: finite-difference gradient checks and small synthetic datasets."""

from __future__ import annotations

import os
import sys
from typing import Any, Callable

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# pylint: disable=wrong-import-position
from forecast.diffkernel import Parameter, Tape, ops  # noqa: E402


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), 0 when both vanish."""
    denominator = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if denominator < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denominator


def max_gradient_error(fn: Callable[..., Any], *arrays: Any, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    The output of `fn` is contracted with fixed random weights, so outputs whose
    plain sum is constant (softmax, for one) still get a meaningful check.
    """
    params = [Parameter(np.array(a, dtype=np.float64)) for a in arrays]
    weights = np.random.default_rng(seed).standard_normal(np.shape(fn(*params).value))

    def objective() -> float:
        return float(np.sum(fn(*params).value * weights))

    with Tape() as tape:
        tape.backward(ops.sum(ops.mul(fn(*params), weights)))
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            original = p.value[idx]
            p.value[idx] = original + eps
            plus = objective()
            p.value[idx] = original - eps
            minus = objective()
            p.value[idx] = original
            numeric[idx] = (plus - minus) / (2.0 * eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def gradcheck() -> Callable[..., float]:
    """The finite-difference checker as a fixture."""
    return max_gradient_error


@pytest.fixture
def rng() -> np.random.Generator:
    """Fresh seeded generator per test."""
    return np.random.default_rng(1234)
