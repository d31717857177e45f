"""Displacement errors, likelihood estimators, the constant-velocity baseline and mode recovery."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import gaussian_kde

from .config import Config
from .diffkernel.distributions import gaussian_log_density
from .dynamics import GaussianTrajectory
from .errors import InputError, ParameterizationError


def _pair(prediction: Any, truth: Any) -> tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if prediction.shape != truth.shape or prediction.ndim != 2 or prediction.shape[-1] != 2:
        raise InputError(f"Prediction {prediction.shape} and ground truth {truth.shape} must both be (T, 2)")
    if len(truth) == 0:
        raise InputError("Cannot score an empty sequence")
    return prediction, truth


def ade(prediction: Any, truth: Any) -> float:
    """Average displacement error (m)."""
    prediction, truth = _pair(prediction, truth)
    return float(np.mean(np.linalg.norm(prediction - truth, axis=-1)))


def fde(prediction: Any, truth: Any) -> float:
    """Final displacement error (m)."""
    prediction, truth = _pair(prediction, truth)
    return float(np.linalg.norm(prediction[-1] - truth[-1]))


METRIC_FUNCTIONS: dict[str, Callable[[Any, Any], float]] = {"ade": ade, "fde": fde}


def best_of_n(samples: Any, truth: Any, metric: str | Callable[[Any, Any], float] = "ade") -> float:
    """Minimum of a displacement metric over (N, T, 2) samples."""
    fn = METRIC_FUNCTIONS.get(metric) if isinstance(metric, str) else metric
    if fn is None:
        raise InputError(f"Unknown metric '{metric}'")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) == 0:
        raise InputError("best_of_n needs a non-empty (N, T, 2) sample set")
    return min(fn(s, truth) for s in samples)


@dataclass
class KdeResult:
    """KDE NLL plus per-step detail."""

    nll: float
    per_step: np.ndarray
    degenerate_steps: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        """Whether any step fell back to the floor because its samples had no spread."""
        return bool(self.degenerate_steps)


def kde_nll_detailed(samples: Any, truth: Any, floor: float = Config.NLL_FLOOR) -> KdeResult:
    """Per-step Gaussian KDE (Scott's rule) NLL of the ground truth, log-density floored at `floor`."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1:] != truth.shape:
        raise InputError(f"Samples {samples.shape} do not match ground truth {truth.shape}")
    if samples.shape[0] < 2:
        raise InputError("KDE NLL needs at least 2 samples per timestep")
    per_step = np.empty(truth.shape[0])
    degenerate = []
    for t in range(truth.shape[0]):
        try:
            log_density = float(gaussian_kde(samples[:, t].T).logpdf(truth[t][:, None])[0])
        except np.linalg.LinAlgError:
            degenerate.append(t)
            log_density = floor
        per_step[t] = -max(log_density, floor)
    if degenerate:
        logging.debug(f"KDE fell back to the floor at steps {degenerate}")
    return KdeResult(float(np.mean(per_step)), per_step, degenerate)


def kde_nll(samples: Any, truth: Any, floor: float = Config.NLL_FLOOR) -> float:
    """Mean over timesteps of the negative KDE log-density at the ground truth (nats)."""
    return kde_nll_detailed(samples, truth, floor).nll


def analytic_nll(
    trajectories: GaussianTrajectory | Sequence[GaussianTrajectory],
    truth: Any,
    mode_probs: Any = None,
) -> float:
    """Mean over timesteps of -log sum_z p(z) N(gt_t; mu_zt, Sigma_zt)."""
    if isinstance(trajectories, GaussianTrajectory):
        trajectories = [trajectories]
    truth = np.asarray(truth, dtype=np.float64)
    weights = np.full(len(trajectories), 1.0 / len(trajectories)) if mode_probs is None else np.asarray(mode_probs)
    if len(weights) != len(trajectories):
        raise InputError(f"{len(weights)} mode probabilities for {len(trajectories)} trajectories")
    log_weights = np.log(np.maximum(weights, 1e-300))
    total = 0.0
    for t, point in enumerate(truth):
        try:
            terms = [
                lw + gaussian_log_density(point, traj.means[t], traj.covariances[t])
                for lw, traj in zip(log_weights, trajectories)
            ]
        except ParameterizationError as e:
            raise InputError(f"Step {t}: {e}") from e
        total -= float(logsumexp(terms))
    return total / len(truth)


# Constant-velocity baseline


def const_velocity_baseline(history: Any, horizon: int) -> np.ndarray:
    """Extrapolate the last observed displacement over `horizon` steps; history rows start with (x, y)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or len(history) < 2:
        raise InputError("Constant velocity needs at least two history points")
    step = history[-1, :2] - history[-2, :2]
    return history[-1, :2] + step * np.arange(1, horizon + 1)[:, None]


def fit_const_velocity_sigmas(histories: Sequence[Any], futures: Sequence[Any]) -> np.ndarray:
    """Per-step isotropic standard deviations (T,) of constant-velocity residuals."""
    if not histories:
        raise InputError("Cannot fit baseline noise without examples")
    residuals = np.stack(
        [np.asarray(f)[:, :2] - const_velocity_baseline(h, len(f)) for h, f in zip(histories, futures)]
    )
    return np.sqrt(np.maximum(np.mean(residuals**2, axis=(0, 2)), 1e-6))


def const_velocity_gaussian(history: Any, horizon: int, sigmas: np.ndarray) -> GaussianTrajectory:
    """Constant-velocity means with fixed per-step isotropic covariances."""
    means = const_velocity_baseline(history, horizon)
    return GaussianTrajectory(means, (np.asarray(sigmas) ** 2)[:, None, None] * np.eye(2))


# Mode recovery


@dataclass
class ModeRecovery:
    """Agreement between argmax latent modes and scripted labels."""

    agreement: float
    mapping: dict[int, str]
    count: int


def mode_recovery(
    calibration_modes: Sequence[int],
    calibration_labels: Sequence[str | None],
    test_modes: Sequence[int],
    test_labels: Sequence[str | None],
) -> ModeRecovery:
    """Map each mode to its majority label on calibration data and score held-out agreement."""
    if any(label is None for label in list(calibration_labels) + list(test_labels)):
        raise InputError("Mode recovery needs labeled episodes")
    if not calibration_labels or not test_labels:
        raise InputError("Mode recovery needs calibration and test examples")
    votes: dict[int, Counter[str]] = {}
    for mode, label in zip(calibration_modes, calibration_labels):
        votes.setdefault(int(mode), Counter())[label] += 1  # type: ignore[index]
    fallback = Counter(calibration_labels).most_common(1)[0][0]
    mapping = {mode: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for mode, c in votes.items()}
    hits = sum(mapping.get(int(m), fallback) == label for m, label in zip(test_modes, test_labels))
    return ModeRecovery(hits / len(test_labels), mapping, len(test_labels))
