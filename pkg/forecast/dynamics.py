"""Agent dynamics and closed-form Gaussian uncertainty propagation.

Two models are supported. The single integrator takes velocities as actions and
is linear, so mean and covariance propagate exactly. The dynamically-extended
unicycle has state (x, y, heading, speed) and actions (yaw rate, acceleration);
its mean is integrated in closed form holding the action constant over a step
and its covariance is propagated through the step's Jacobians.

Every formula is written once on Tensors. The numpy entry points wrap their
inputs as constant Tensors, so the same code serves analytic prediction and
training-time backpropagation through the dynamics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .diffkernel import ops
from .diffkernel.distributions import GmmStep, gaussian_log_density_entries
from .diffkernel.tape import Parameter, Tape, Tensor
from .errors import ConfigurationError, InputError

PSD_TOLERANCE = 1e-10
SERIES_LIMIT = 1e-3
"""Turn rate below which the step uses a second-order series; position error is at most |w|^3 v_max dt^4 / 24."""

DYNAMICS_AGENT_TYPES = {
    "integrator": ("pedestrian", "robot"),
    "unicycle": ("vehicle", "robot"),
}


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """(M + M^T) / 2 over the last two axes."""
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))


def check_psd(matrix: Any, what: str) -> np.ndarray:
    """Return `matrix` as float64 or raise InputError if it is not symmetric PSD."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim < 2 or matrix.shape[-1] != matrix.shape[-2]:
        raise InputError(f"{what} must be square, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InputError(f"{what} contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if np.max(np.abs(matrix - np.swapaxes(matrix, -1, -2)), initial=0.0) > PSD_TOLERANCE * scale:
        raise InputError(f"{what} is not symmetric")
    if np.min(np.linalg.eigvalsh(symmetrize(matrix)), initial=0.0) < -PSD_TOLERANCE * scale:
        raise InputError(f"{what} is not positive semi-definite")
    return matrix


@dataclass(frozen=True)
class DynamicsLimits:
    """Feasibility bounds for unicycle rollouts."""

    v_max: float = 15.0
    omega_max: float = 1.2
    accel_max: float = 4.0


@dataclass
class SingleIntegratorState:
    """Gaussian over a 2D position."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.covariance = check_psd(np.asarray(self.covariance, dtype=np.float64).reshape(2, 2), "position covariance")


@dataclass
class UnicycleState:
    """Gaussian over (x, y, heading, speed)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.covariance = check_psd(np.asarray(self.covariance, dtype=np.float64).reshape(4, 4), "unicycle covariance")

    @staticmethod
    def deterministic(x: float, y: float, heading: float, speed: float) -> UnicycleState:
        """Point-mass state."""
        return UnicycleState(np.array([x, y, heading, speed]), np.zeros((4, 4)))


@dataclass
class ActionDistribution:
    """Gaussian over a 2D action: (vx, vy) for the integrator, (yaw rate, accel) for the unicycle."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.covariance = check_psd(np.asarray(self.covariance, dtype=np.float64).reshape(2, 2), "action covariance")

    @staticmethod
    def from_gmm(step: GmmStep) -> ActionDistribution:
        """Single-component mixture to an action distribution."""
        if step.components != 1:
            raise ConfigurationError(f"Dynamics integration needs one mixture component, got {step.components}")
        return ActionDistribution(step.means[0], step.covariances[0])


@dataclass
class GaussianTrajectory:
    """Per-step position means (T, 2) and covariances (T, 2, 2)."""

    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 2, 2)
        if len(self.means) != len(self.covariances):
            raise InputError("GaussianTrajectory means and covariances differ in length")

    @property
    def horizon(self) -> int:
        """Number of predicted steps."""
        return len(self.means)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, T, 2) draws from the per-step marginals."""
        chol = np.linalg.cholesky(self.covariances)
        noise = rng.standard_normal((n, self.horizon, 2))
        return self.means[None] + np.einsum("tij,ntj->nti", chol, noise)


# Single integrator


def si_propagate(state: SingleIntegratorState, action: ActionDistribution, dt: float) -> SingleIntegratorState:
    """mu' = mu + mu_u dt, Sigma' = Sigma + dt^2 Sigma_u (action independent of state)."""
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    return SingleIntegratorState(
        state.mean + action.mean * dt,
        symmetrize(state.covariance + dt * dt * action.covariance),
    )


# Unicycle, Tensor formulas


def _unicycle_terms(phi: Tensor, v: Tensor, omega: Tensor, accel: Tensor, dt: float) -> dict[str, Tensor]:
    """Displacements of one constant-action step and their partial derivatives."""
    small = np.abs(omega.value) < SERIES_LIMIT
    w = ops.where(small, 1.0, omega)
    w2 = ops.square(w)
    phi_next = phi + omega * dt
    v_next = v + accel * dt
    s, c = ops.sin(phi), ops.cos(phi)
    s2, c2 = ops.sin(phi_next), ops.cos(phi_next)

    exact = {
        "dx": (v_next * s2 - v * s) / w + accel * (c2 - c) / w2,
        "dy": -(v_next * c2 - v * c) / w + accel * (s2 - s) / w2,
        "dx_dv": (s2 - s) / w,
        "dy_dv": -(c2 - c) / w,
        "dx_da": dt * s2 / w + (c2 - c) / w2,
        "dy_da": -dt * c2 / w + (s2 - s) / w2,
        "dx_dw": (v_next * c2 * dt) / w
        - (v_next * s2 - v * s) / w2
        - accel * s2 * dt / w2
        - 2.0 * accel * (c2 - c) / (w2 * w),
        "dy_dw": (v_next * s2 * dt) / w
        + (v_next * c2 - v * c) / w2
        + accel * c2 * dt / w2
        - 2.0 * accel * (s2 - s) / (w2 * w),
    }

    # Moments of the speed profile: P = int v(t), Q = int v(t) t, R = int v(t) t^2 over the step.
    p_term = v * dt + accel * (dt**2 / 2.0)
    q_term = v * (dt**2 / 2.0) + accel * (dt**3 / 3.0)
    r_term = v * (dt**3 / 3.0) + accel * (dt**4 / 4.0)
    half_w2 = 0.5 * ops.square(omega)
    series = {
        "dx": p_term * c - omega * q_term * s - half_w2 * r_term * c,
        "dy": p_term * s + omega * q_term * c - half_w2 * r_term * s,
        "dx_dv": dt * c - omega * (dt**2 / 2.0) * s - half_w2 * (dt**3 / 3.0) * c,
        "dy_dv": dt * s + omega * (dt**2 / 2.0) * c - half_w2 * (dt**3 / 3.0) * s,
        "dx_da": (dt**2 / 2.0) * c - omega * (dt**3 / 3.0) * s - half_w2 * (dt**4 / 4.0) * c,
        "dy_da": (dt**2 / 2.0) * s + omega * (dt**3 / 3.0) * c - half_w2 * (dt**4 / 4.0) * s,
        "dx_dw": -q_term * s - omega * r_term * c,
        "dy_dw": q_term * c - omega * r_term * s,
    }
    terms = {key: ops.where(small, series[key], exact[key]) for key in exact}
    terms["phi_next"] = phi_next
    terms["v_next"] = v_next
    return terms


def unicycle_step_tensors(state: Sequence[Tensor], action: Sequence[Tensor], dt: float) -> list[Tensor]:
    """Closed-form mean step on (x, y, heading, speed) and (yaw rate, accel) component tensors."""
    x, y, phi, v = state
    omega, accel = action
    terms = _unicycle_terms(phi, v, omega, accel, dt)
    return [x + terms["dx"], y + terms["dy"], terms["phi_next"], terms["v_next"]]


def unicycle_jacobian_tensors(state: Sequence[Tensor], action: Sequence[Tensor], dt: float) -> tuple[Tensor, Tensor]:
    """Jacobians A (..., 4, 4) and B (..., 4, 2) of the discrete step."""
    _, _, phi, v = state
    omega, accel = action
    t = _unicycle_terms(phi, v, omega, accel, dt)
    one = Tensor(np.ones(np.broadcast_shapes(phi.shape, omega.shape)))
    zero = Tensor(np.zeros(one.shape))
    rows_a = [
        [one, zero, -t["dy"], t["dx_dv"]],
        [zero, one, t["dx"], t["dy_dv"]],
        [zero, zero, one, zero],
        [zero, zero, zero, one],
    ]
    rows_b = [
        [t["dx_dw"], t["dx_da"]],
        [t["dy_dw"], t["dy_da"]],
        [one * dt, zero],
        [zero, one * dt],
    ]
    a = ops.stack([ops.stack(row, axis=-1) for row in rows_a], axis=-2)
    b = ops.stack([ops.stack(row, axis=-1) for row in rows_b], axis=-2)
    return a, b


def _split(values: Any, size: int) -> list[Tensor]:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != size:
        raise InputError(f"Expected trailing dimension {size}, got shape {values.shape}")
    return [Tensor(values[..., i]) for i in range(size)]


def unicycle_step_mean(mean: Any, action: Any, dt: float) -> np.ndarray:
    """Next (x, y, heading, speed) after holding (yaw rate, accel) for dt; supports leading batch axes."""
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    out = unicycle_step_tensors(_split(mean, 4), _split(action, 2), dt)
    return np.stack([o.value for o in out], axis=-1)


def unicycle_jacobians(mean: Any, action: Any, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Numpy A = d step / d state and B = d step / d action at the given means."""
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    a, b = unicycle_jacobian_tensors(_split(mean, 4), _split(action, 2), dt)
    return a.value, b.value


def unicycle_propagate(state: UnicycleState, action: ActionDistribution, dt: float) -> UnicycleState:
    """Linearised covariance propagation A Sigma A^T + B Sigma_u B^T, symmetrised."""
    mean = unicycle_step_mean(state.mean, action.mean, dt)
    a, b = unicycle_jacobians(state.mean, action.mean, dt)
    cov = a @ state.covariance @ a.T + b @ action.covariance @ b.T
    return UnicycleState(mean, symmetrize(cov))


# Feasibility


def clamp_actions(speed: np.ndarray, actions: np.ndarray, dt: float, limits: DynamicsLimits) -> np.ndarray:
    """Clamp (yaw rate, accel) so the turn rate is bounded and speed stays in [0, v_max] over the step."""
    actions = np.array(actions, dtype=np.float64, copy=True)
    speed = np.asarray(speed, dtype=np.float64)
    low = np.maximum(-limits.accel_max, -speed / dt)
    high = np.minimum(limits.accel_max, (limits.v_max - speed) / dt)
    actions[..., 0] = np.clip(actions[..., 0], -limits.omega_max, limits.omega_max)
    actions[..., 1] = np.clip(actions[..., 1], low, np.maximum(low, high))
    return actions


def sample_unicycle_rollouts(
    initial: Any,
    action_means: np.ndarray,
    action_covariances: np.ndarray,
    dt: float,
    n: int,
    rng: np.random.Generator,
    limits: DynamicsLimits = DynamicsLimits(),
) -> tuple[np.ndarray, np.ndarray]:
    """Sample actions per step, clamp them and integrate exactly.

    Returns states (n, T + 1, 4) including the initial state, and the applied
    actions (n, T, 2).
    """
    initial = np.asarray(initial, dtype=np.float64).reshape(4)
    action_means = np.asarray(action_means, dtype=np.float64).reshape(-1, 2)
    chol = np.linalg.cholesky(np.asarray(action_covariances, dtype=np.float64).reshape(-1, 2, 2) + 1e-300 * np.eye(2))
    horizon = len(action_means)
    states = np.empty((n, horizon + 1, 4))
    applied = np.empty((n, horizon, 2))
    states[:, 0] = initial
    for t in range(horizon):
        raw = action_means[t] + rng.standard_normal((n, 2)) @ chol[t].T
        applied[:, t] = clamp_actions(states[:, t, 3], raw, dt, limits)
        states[:, t + 1] = unicycle_step_mean(states[:, t], applied[:, t], dt)
    return states, applied


def count_violations(
    states: np.ndarray, actions: np.ndarray, limits: DynamicsLimits = DynamicsLimits(), tolerance: float = 1e-9
) -> int:
    """Number of sampled trajectories breaking a speed or turn-rate bound at any step."""
    speed = states[..., 3]
    bad_speed = np.any((speed < -tolerance) | (speed > limits.v_max + tolerance), axis=-1)
    bad_turn = np.any(np.abs(actions[..., 0]) > limits.omega_max + tolerance, axis=-1)
    bad_accel = np.any(np.abs(actions[..., 1]) > limits.accel_max + tolerance, axis=-1)
    return int(np.sum(bad_speed | bad_turn | bad_accel))


# Whole-horizon propagation


def integrate_prediction(
    initial: SingleIntegratorState | UnicycleState,
    actions: Sequence[GmmStep | ActionDistribution],
    dt: float,
    model: str,
    agent_type: str | None = None,
) -> GaussianTrajectory:
    """Chain the matching propagation over the horizon; returns position marginals."""
    if model not in DYNAMICS_AGENT_TYPES:
        raise ConfigurationError(f"Unknown dynamics model '{model}'")
    if agent_type is not None and agent_type not in DYNAMICS_AGENT_TYPES[model]:
        raise ConfigurationError(f"Dynamics model '{model}' does not apply to {agent_type} agents")
    expected = SingleIntegratorState if model == "integrator" else UnicycleState
    if not isinstance(initial, expected):
        raise ConfigurationError(f"Dynamics model '{model}' needs a {expected.__name__}")

    means, covs = [], []
    state: Any = initial
    for step in actions:
        action = step if isinstance(step, ActionDistribution) else ActionDistribution.from_gmm(step)
        if model == "integrator":
            state = si_propagate(state, action, dt)
        else:
            state = unicycle_propagate(state, action, dt)
        means.append(state.mean[:2])
        covs.append(state.covariance[:2, :2])
    logging.debug(f"Integrated {len(means)} steps through the {model} model")
    return GaussianTrajectory(np.array(means).reshape(-1, 2), np.array(covs).reshape(-1, 2, 2))


# Tape versions used in training


def action_covariance(log_sigmas: Tensor, corrs: Tensor) -> Tensor:
    """(R, 2) log std devs and (R,) correlations to (R, 2, 2) covariance tensors."""
    sx = ops.exp(log_sigmas[:, 0])
    sy = ops.exp(log_sigmas[:, 1])
    cross = corrs * sx * sy
    return ops.stack(
        [ops.stack([ops.square(sx), cross], axis=-1), ops.stack([cross, ops.square(sy)], axis=-1)],
        axis=-2,
    )


def clamp_mean_actions(speed: Tensor, actions: Tensor, dt: float, limits: DynamicsLimits) -> Tensor:
    """Tensor counterpart of clamp_actions for analytic action means; bounds are treated as constants."""
    low = np.maximum(-limits.accel_max, -speed.value / dt)
    high = np.maximum(low, np.minimum(limits.accel_max, (limits.v_max - speed.value) / dt))
    omega = ops.clip(actions[:, 0], -limits.omega_max, limits.omega_max)
    accel = ops.clip(actions[:, 1], low, high)
    return ops.stack([omega, accel], axis=-1)


def propagate_tensors(
    model: str,
    initial: Any,
    action_means: Sequence[Tensor],
    action_covs: Sequence[Tensor],
    dt: float,
    limits: DynamicsLimits | None = None,
) -> tuple[list[Tensor], list[Tensor]]:
    """Differentiable rollout of R rows; returns per-step position means (R, 2) and covariances (R, 2, 2).

    `initial` is (R, 2) positions for the integrator and (R, 4) states for the
    unicycle; the initial covariance is zero.
    """
    initial = ops.as_tensor(initial)
    rows = initial.shape[0]
    means: list[Tensor] = []
    covs: list[Tensor] = []
    if model == "integrator":
        mean: Tensor = initial
        cov: Tensor = Tensor(np.zeros((rows, 2, 2)))
        for mu_u, sigma_u in zip(action_means, action_covs):
            mean = mean + mu_u * dt
            cov = cov + sigma_u * (dt * dt)
            means.append(mean)
            covs.append(cov)
        return means, covs
    if model != "unicycle":
        raise ConfigurationError(f"Unknown dynamics model '{model}'")

    state = [initial[:, i] for i in range(4)]
    cov = Tensor(np.zeros((rows, 4, 4)))
    for mu_u, sigma_u in zip(action_means, action_covs):
        if limits is not None:
            mu_u = clamp_mean_actions(state[3], mu_u, dt, limits)
        action = [mu_u[:, 0], mu_u[:, 1]]
        a, b = unicycle_jacobian_tensors(state, action, dt)
        cov = ops.matmul(ops.matmul(a, cov), ops.swapaxes(a)) + ops.matmul(ops.matmul(b, sigma_u), ops.swapaxes(b))
        cov = 0.5 * (cov + ops.swapaxes(cov))
        state = unicycle_step_tensors(state, action, dt)
        means.append(ops.stack(state[:2], axis=-1))
        covs.append(cov[:, :2, :2])
    return means, covs


def position_log_likelihood(
    means: Sequence[Tensor], covs: Sequence[Tensor], targets: Any, jitter: float = 1e-6
) -> Tensor:
    """Sum over steps of log N(target_t; mean_t, cov_t + jitter I); targets are (R, T, 2)."""
    targets = np.asarray(targets, dtype=np.float64)
    total: Tensor | None = None
    for t, (mean, cov) in enumerate(zip(means, covs)):
        term = gaussian_log_density_entries(
            targets[:, t], mean, cov[:, 0, 0] + jitter, cov[:, 0, 1], cov[:, 1, 1] + jitter
        )
        total = term if total is None else total + term
    if total is None:
        raise InputError("Cannot score an empty horizon")
    return total


def backprop_through_dynamics(
    model: str,
    initial: np.ndarray,
    action_means: Parameter,
    action_log_sigmas: Parameter,
    action_corrs: Parameter,
    targets: np.ndarray,
    dt: float,
    jitter: float = 1e-6,
) -> float:
    """Negative position log-likelihood of integrated actions, with gradients left on the action parameters.

    Action parameters are (R, T, 2), (R, T, 2) and (R, T). Returns the loss value.
    """
    steps = action_means.shape[1]
    with Tape() as tape:
        mus = [action_means[:, t] for t in range(steps)]
        sigmas = [action_covariance(action_log_sigmas[:, t], action_corrs[:, t]) for t in range(steps)]
        means, covs = propagate_tensors(model, initial, mus, sigmas, dt)
        loss = -ops.sum(position_log_likelihood(means, covs, targets, jitter))
        tape.backward(loss)
    return float(loss.value)
