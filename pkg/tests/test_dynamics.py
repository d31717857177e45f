"""Tests for dynamics integration and Gaussian propagation."""

from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import solve_ivp

from forecast.diffkernel.distributions import GmmStep
from forecast.diffkernel.tape import Parameter
from forecast.dynamics import (
    SERIES_LIMIT,
    ActionDistribution,
    DynamicsLimits,
    GaussianTrajectory,
    SingleIntegratorState,
    UnicycleState,
    backprop_through_dynamics,
    check_psd,
    count_violations,
    integrate_prediction,
    sample_unicycle_rollouts,
    si_propagate,
    unicycle_jacobians,
    unicycle_propagate,
    unicycle_step_mean,
)
from forecast.errors import ConfigurationError, InputError


def frobenius_error(estimate, reference):
    """Relative Frobenius distance."""
    return float(np.linalg.norm(estimate - reference) / np.linalg.norm(reference))


def unicycle_ode(_t, z, omega, accel):
    """Continuous-time extended unicycle."""
    _, _, phi, v = z
    return [v * math.cos(phi), v * math.sin(phi), omega, accel]


def quadrature_covariance(mean, action_mean, action_cov, dt, points=24):
    """Covariance of the exact nonlinear step under Gaussian action noise, by Gauss-Hermite quadrature."""
    nodes, weights = hermegauss(points)
    weights = weights / math.sqrt(2.0 * math.pi)
    chol = np.linalg.cholesky(action_cov)
    z = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), axis=-1).reshape(-1, 2)
    w = np.outer(weights, weights).reshape(-1)
    actions = action_mean + z @ chol.T
    states = unicycle_step_mean(np.broadcast_to(mean, (len(actions), 4)), actions, dt)
    centre = w @ states
    deviations = states - centre
    return (deviations * w[:, None]).T @ deviations


class TestCovarianceChecks:
    """Symmetric PSD validation."""

    def test_accepts_psd(self):
        """Zero and identity pass."""
        check_psd(np.zeros((2, 2)), "zero")
        check_psd(np.eye(4), "identity")

    def test_rejects_asymmetric(self):
        """Off-diagonal mismatch is an input error."""
        with pytest.raises(InputError):
            check_psd(np.array([[1.0, 0.5], [0.0, 1.0]]), "asymmetric")

    def test_rejects_indefinite(self):
        """A negative eigenvalue is an input error."""
        with pytest.raises(InputError):
            ActionDistribution(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_non_finite(self):
        """NaN covariance entries are refused."""
        with pytest.raises(InputError):
            SingleIntegratorState(np.zeros(2), np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestSingleIntegrator:
    """Exact linear propagation."""

    def test_null_action(self):
        """Zero action leaves the state unchanged."""
        state = SingleIntegratorState(np.array([1.0, 2.0]), 0.3 * np.eye(2))
        out = si_propagate(state, ActionDistribution(np.zeros(2), np.zeros((2, 2))), 0.4)
        np.testing.assert_array_equal(out.mean, state.mean)
        np.testing.assert_array_equal(out.covariance, state.covariance)

    def test_direct_substitution(self):
        """mu' = (0.1, 0) and Sigma' = 1e-4 I for a unit x-velocity over 0.1 s."""
        state = SingleIntegratorState(np.zeros(2), np.zeros((2, 2)))
        out = si_propagate(state, ActionDistribution(np.array([1.0, 0.0]), 0.01 * np.eye(2)), 0.1)
        np.testing.assert_allclose(out.mean, [0.1, 0.0], atol=1e-15)
        np.testing.assert_allclose(out.covariance, 1e-4 * np.eye(2), rtol=1e-12)

    def test_non_positive_dt(self):
        """dt must be positive."""
        state = SingleIntegratorState(np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(InputError):
            si_propagate(state, ActionDistribution(np.zeros(2), np.zeros((2, 2))), 0.0)

    def test_chain_matches_closed_form(self, rng):
        """Sigma_p(T) = Sigma_p(0) + dt^2 sum_t Sigma_u(t), and the means add up likewise."""
        dt = 0.4
        initial = SingleIntegratorState(np.array([0.5, -1.0]), 0.05 * np.eye(2))
        actions = []
        for _ in range(12):
            root = rng.standard_normal((2, 2)) * 0.3
            actions.append(ActionDistribution(rng.standard_normal(2), root @ root.T))
        trajectory = integrate_prediction(initial, actions, dt, "integrator", "pedestrian")
        expected_cov = initial.covariance + dt * dt * np.cumsum([a.covariance for a in actions], axis=0)
        expected_mean = initial.mean + dt * np.cumsum([a.mean for a in actions], axis=0)
        np.testing.assert_allclose(trajectory.covariances, expected_cov, rtol=1e-12)
        np.testing.assert_allclose(trajectory.means, expected_mean, rtol=1e-12, atol=1e-14)

    def test_matches_monte_carlo(self, rng):
        """Twelve steps agree with a million sampled rollouts of the same linear system."""
        dt, n = 0.4, 1_000_000
        initial = SingleIntegratorState(np.array([1.0, 0.0]), np.array([[0.02, 0.005], [0.005, 0.01]]))
        actions = []
        for t in range(12):
            cov = np.array([[0.2 + 0.01 * t, 0.05], [0.05, 0.1]])
            actions.append(ActionDistribution(np.array([1.0, 0.1 * t]), cov))
        trajectory = integrate_prediction(initial, actions, dt, "integrator")

        positions = rng.multivariate_normal(initial.mean, initial.covariance, n)
        for action in actions:
            positions += dt * rng.multivariate_normal(action.mean, action.covariance, n)
        final_mean, final_cov = trajectory.means[-1], trajectory.covariances[-1]
        standard_error = np.sqrt(np.diag(final_cov) / n)
        assert np.all(np.abs(positions.mean(axis=0) - final_mean) < 3.0 * standard_error)
        assert frobenius_error(np.cov(positions.T), final_cov) < 0.01

    def test_stationary_for_zero_actions(self):
        """Zero-mean zero-covariance actions keep the trajectory still."""
        initial = SingleIntegratorState(np.array([2.0, 3.0]), np.zeros((2, 2)))
        steps = [GmmStep(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 2)))] * 5
        trajectory = integrate_prediction(initial, steps, 0.4, "integrator")
        np.testing.assert_array_equal(trajectory.means, np.tile([2.0, 3.0], (5, 1)))
        np.testing.assert_array_equal(trajectory.covariances, 0.0)


class TestUnicycleMean:
    """Closed-form constant-action step."""

    def test_straight_line(self):
        """No turn and no acceleration moves v dt along the heading."""
        out = unicycle_step_mean([0.0, 0.0, 0.0, 1.0], [0.0, 0.0], 1.0)
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0, 1.0], atol=1e-15)

    def test_constant_acceleration(self):
        """a = 1 from rest covers 0.5 m and ends at 1 m/s."""
        out = unicycle_step_mean([0.0, 0.0, 0.0, 0.0], [0.0, 1.0], 1.0)
        np.testing.assert_allclose(out, [0.5, 0.0, 0.0, 1.0], atol=1e-15)

    @pytest.mark.parametrize(
        "state, action",
        [
            ([0.0, 0.0, 0.0, 1.0], [math.pi / 2, 0.0]),
            ([1.0, -2.0, 0.7, 3.0], [0.4, -0.8]),
            ([0.0, 0.0, -2.5, 5.0], [-1.1, 1.5]),
            ([0.0, 0.0, 1.0, 2.0], [5e-4, 0.3]),
        ],
    )
    def test_matches_fine_integration(self, state, action):
        """The closed form agrees with a tight adaptive ODE solve to 1e-8."""
        solution = solve_ivp(
            unicycle_ode, (0.0, 1.0), state, args=tuple(action), method="DOP853", rtol=1e-13, atol=1e-13
        )
        np.testing.assert_allclose(unicycle_step_mean(state, action, 1.0), solution.y[:, -1], atol=1e-8)

    def test_continuous_across_series_switch(self):
        """Both sides of the small-turn-rate switch agree."""
        state = [0.0, 0.0, 0.3, 8.0]
        below = unicycle_step_mean(state, [0.999e-3, 1.0], 0.5)
        above = unicycle_step_mean(state, [1.001e-3, 1.0], 0.5)
        np.testing.assert_allclose(below, above, atol=1e-8)

    def test_series_within_truncation_bound(self):
        """Just under the switch the series step is as close to the ODE as its third-order remainder allows."""
        state, omega, accel, dt = [0.0, 0.0, 0.3, 20.0], 0.999 * SERIES_LIMIT, 2.0, 1.0
        solution = solve_ivp(
            unicycle_ode, (0.0, dt), state, args=(omega, accel), method="DOP853", rtol=1e-13, atol=1e-13
        )
        v_max = state[3] + accel * dt
        bound = abs(omega) ** 3 * v_max * dt**4 / 24.0
        error = np.abs(unicycle_step_mean(state, [omega, accel], dt) - solution.y[:, -1])
        assert np.all(error[:2] <= bound + 1e-11)
        assert np.all(error[2:] <= 1e-11)

    def test_batched(self, rng):
        """Leading axes broadcast row by row."""
        states = rng.standard_normal((5, 4))
        actions = rng.standard_normal((5, 2))
        batched = unicycle_step_mean(states, actions, 0.1)
        for s, a, row in zip(states, actions, batched):
            np.testing.assert_allclose(unicycle_step_mean(s, a, 0.1), row, rtol=1e-14)

    def test_bad_shapes(self):
        """States need four components."""
        with pytest.raises(InputError):
            unicycle_step_mean([0.0, 0.0, 0.0], [0.0, 0.0], 0.1)


class TestUnicyclePropagation:
    """Linearised covariance propagation."""

    @pytest.mark.parametrize("omega", [0.3, 1e-4, 0.0, -0.9])
    def test_jacobians_match_finite_differences(self, omega):
        """A and B equal central differences of the step."""
        mean = np.array([1.0, 2.0, 0.4, 3.0])
        action = np.array([omega, 0.5])
        dt, eps = 0.5, 1e-6
        a, b = unicycle_jacobians(mean, action, dt)
        numeric_a = np.zeros((4, 4))
        for j in range(4):
            step = np.zeros(4)
            step[j] = eps
            numeric_a[:, j] = unicycle_step_mean(mean + step, action, dt) - unicycle_step_mean(mean - step, action, dt)
        numeric_b = np.zeros((4, 2))
        for j in range(2):
            step = np.zeros(2)
            step[j] = eps
            numeric_b[:, j] = unicycle_step_mean(mean, action + step, dt) - unicycle_step_mean(mean, action - step, dt)
        assert frobenius_error(a, numeric_a / (2 * eps)) < 1e-6
        assert frobenius_error(b, numeric_b / (2 * eps)) < 1e-6

    def test_deterministic_limit(self):
        """Zero covariance in, zero covariance out, and the mean follows the step."""
        state = UnicycleState.deterministic(0.0, 0.0, 0.2, 4.0)
        action = ActionDistribution(np.array([0.3, 0.5]), np.zeros((2, 2)))
        out = unicycle_propagate(state, action, 0.1)
        np.testing.assert_array_equal(out.covariance, 0.0)
        np.testing.assert_array_equal(out.mean, unicycle_step_mean(state.mean, action.mean, 0.1))

    def test_matches_monte_carlo(self, rng):
        """Small action noise: linearised covariance within 5% of sampled nonlinear steps."""
        state = UnicycleState.deterministic(0.0, 0.0, 0.1, 2.0)
        action = ActionDistribution(np.array([0.3, 0.2]), 1e-4 * np.eye(2))
        dt = 0.5
        out = unicycle_propagate(state, action, dt)
        samples = rng.multivariate_normal(action.mean, action.covariance, 200_000)
        stepped = unicycle_step_mean(np.broadcast_to(state.mean, (len(samples), 4)), samples, dt)
        assert frobenius_error(out.covariance, np.cov(stepped.T)) < 0.05

    def test_linearisation_error_is_second_order(self):
        """Halving the action covariance quarters the discrepancy from the exact step covariance."""
        mean = np.array([0.0, 0.0, 0.2, 6.0])
        action_mean = np.array([0.5, 0.3])
        dt = 1.0
        discrepancies = []
        for scale in (4e-3, 2e-3):
            cov = scale * np.array([[1.0, 0.2], [0.2, 0.5]])
            linear = unicycle_propagate(UnicycleState(mean, np.zeros((4, 4))), ActionDistribution(action_mean, cov), dt)
            exact = quadrature_covariance(mean, action_mean, cov, dt)
            discrepancies.append(np.linalg.norm(linear.covariance - exact))
        assert discrepancies[1] / discrepancies[0] < 0.27

    def test_covariances_stay_psd(self, rng):
        """Chained propagation keeps every covariance symmetric PSD."""
        state = UnicycleState(np.array([0.0, 0.0, 0.0, 5.0]), 0.01 * np.eye(4))
        for _ in range(20):
            root = rng.standard_normal((2, 2)) * 0.2
            state = unicycle_propagate(state, ActionDistribution(rng.normal(0.0, 0.5, 2), root @ root.T), 0.1)
            np.testing.assert_array_equal(state.covariance, state.covariance.T)
            assert np.min(np.linalg.eigvalsh(state.covariance)) >= -1e-10


class TestIntegratePrediction:
    """Horizon chaining and type checks."""

    def test_unicycle_positions(self):
        """The unicycle chain reports position marginals only."""
        initial = UnicycleState.deterministic(0.0, 0.0, 0.0, 5.0)
        actions = [ActionDistribution(np.array([0.1, 0.0]), 1e-3 * np.eye(2))] * 6
        trajectory = integrate_prediction(initial, actions, 0.1, "unicycle", "vehicle")
        assert isinstance(trajectory, GaussianTrajectory)
        assert trajectory.means.shape == (6, 2) and trajectory.covariances.shape == (6, 2, 2)
        assert trajectory.means[-1, 0] > 2.9

    def test_agent_type_mismatch(self):
        """Pedestrians are not unicycles."""
        with pytest.raises(ConfigurationError):
            integrate_prediction(UnicycleState.deterministic(0, 0, 0, 1), [], 0.1, "unicycle", "pedestrian")

    def test_state_model_mismatch(self):
        """The initial state must match the model."""
        with pytest.raises(ConfigurationError):
            integrate_prediction(SingleIntegratorState(np.zeros(2), np.zeros((2, 2))), [], 0.1, "unicycle")

    def test_unknown_model(self):
        """Only integrator and unicycle exist."""
        with pytest.raises(ConfigurationError):
            integrate_prediction(SingleIntegratorState(np.zeros(2), np.zeros((2, 2))), [], 0.1, "bicycle")

    def test_needs_single_component(self):
        """Mixtures with M > 1 cannot be integrated."""
        step = GmmStep(np.full(2, 0.5), np.zeros((2, 2)), np.tile(np.eye(2), (2, 1, 1)))
        with pytest.raises(ConfigurationError):
            integrate_prediction(SingleIntegratorState(np.zeros(2), np.zeros((2, 2))), [step], 0.1, "integrator")

    def test_trajectory_sampling_moments(self, rng):
        """Per-step marginal draws have the stored means."""
        trajectory = GaussianTrajectory(np.array([[1.0, 2.0], [3.0, 4.0]]), np.tile(0.01 * np.eye(2), (2, 1, 1)))
        draws = trajectory.sample(rng, 50_000)
        np.testing.assert_allclose(draws.mean(axis=0), trajectory.means, atol=5e-3)


class TestFeasibility:
    """Sampled unicycle rollouts respect the limits."""

    def test_no_violations(self, rng):
        """A hundred thousand wide-noise rollouts never leave the speed or turn-rate bounds."""
        limits = DynamicsLimits()
        horizon = 12
        means = np.tile([0.0, 2.0], (horizon, 1))
        covs = np.tile(np.diag([1.0, 25.0]), (horizon, 1, 1))
        states, applied = sample_unicycle_rollouts([0.0, 0.0, 0.0, 14.0], means, covs, 0.1, 100_000, rng, limits)
        assert states.shape == (100_000, horizon + 1, 4)
        assert count_violations(states, applied, limits) == 0
        assert np.max(states[..., 3]) <= limits.v_max + 1e-9
        assert np.min(states[..., 3]) >= -1e-9

    def test_counter_flags_violations(self):
        """The checker itself notices an overspeed."""
        states = np.zeros((2, 3, 4))
        states[1, 2, 3] = 20.0
        assert count_violations(states, np.zeros((2, 2, 2))) == 1


def dynamics_gradient_error(model, initial, means, log_sigmas, corrs, targets, dt, eps=1e-6):
    """Relative error of tape gradients against central differences of the returned loss."""
    params = [Parameter(means.copy()), Parameter(log_sigmas.copy()), Parameter(corrs.copy())]
    backprop_through_dynamics(model, initial, *params, targets, dt)
    analytic = np.concatenate([p.grad.ravel() for p in params])
    numeric = []
    for p in params:
        for idx in np.ndindex(p.value.shape):
            original = p.value[idx]
            p.value[idx] = original + eps
            plus = backprop_through_dynamics(model, initial, *params, targets, dt)
            p.value[idx] = original - eps
            minus = backprop_through_dynamics(model, initial, *params, targets, dt)
            p.value[idx] = original
            numeric.append((plus - minus) / (2 * eps))
    numeric = np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))), params


class TestBackpropThroughDynamics:
    """Position-space losses reach the action parameters."""

    def test_integrator_single_step(self, rng):
        """One integrator step: relative gradient error below 1e-6."""
        error, _ = dynamics_gradient_error(
            "integrator",
            rng.standard_normal((3, 2)),
            rng.standard_normal((3, 1, 2)),
            rng.normal(-0.5, 0.2, (3, 1, 2)),
            rng.uniform(-0.5, 0.5, (3, 1)),
            rng.standard_normal((3, 1, 2)),
            0.4,
        )
        assert error < 1e-6

    def test_unicycle_six_steps(self, rng):
        """Six chained unicycle steps: relative gradient error below 1e-4."""
        initial = np.column_stack([rng.standard_normal((2, 2)), rng.uniform(-1, 1, 2), rng.uniform(2, 6, 2)])
        error, _ = dynamics_gradient_error(
            "unicycle",
            initial,
            rng.normal(0.0, 0.3, (2, 6, 2)),
            rng.normal(-1.0, 0.2, (2, 6, 2)),
            rng.uniform(-0.5, 0.5, (2, 6)),
            initial[:, None, :2] + rng.normal(0.0, 0.5, (2, 6, 2)) + np.arange(1, 7)[None, :, None] * 0.4,
            0.1,
        )
        assert error < 1e-4

    def test_zero_error_zero_gradient(self, rng):
        """Targets on the integrated means leave the action means without gradient."""
        dt = 0.4
        initial = rng.standard_normal((2, 2))
        means = Parameter(rng.standard_normal((2, 4, 2)))
        targets = initial[:, None, :] + dt * np.cumsum(means.value, axis=1)
        backprop_through_dynamics(
            "integrator", initial, means, Parameter(np.full((2, 4, 2), -1.0)), Parameter(np.zeros((2, 4))), targets, dt
        )
        np.testing.assert_allclose(means.grad, 0.0, atol=1e-10)
