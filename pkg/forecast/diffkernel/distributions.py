"""Bivariate Gaussian and Gaussian-mixture densities.

Covariances are parameterised by two log standard deviations and a correlation
squashed through tanh into (-1, 1), so they are positive definite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from ..errors import ParameterizationError
from . import ops
from .tape import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
CORR_LIMIT = 1.0 - 1e-6
WEIGHT_TOLERANCE = 1e-9


@dataclass
class GmmStep:
    """One timestep of a bivariate Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 2, 2)

    @property
    def components(self) -> int:
        """Number of mixture components M."""
        return len(self.weights)

    def validate(self) -> GmmStep:
        """Check normalisation and positive definiteness."""
        m = self.components
        if self.means.shape != (m, 2) or self.covariances.shape != (m, 2, 2):
            raise ParameterizationError(f"Inconsistent mixture shapes for {m} components")
        if np.any(self.weights <= 0.0) or abs(float(self.weights.sum()) - 1.0) > WEIGHT_TOLERANCE:
            raise ParameterizationError(f"Mixture weights must be positive and sum to 1, got {self.weights}")
        for k, cov in enumerate(self.covariances):
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ParameterizationError(f"Covariance of component {k} is not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as e:
                raise ParameterizationError(f"Covariance of component {k} is not positive definite") from e
        return self

    def mean(self) -> np.ndarray:
        """Mixture mean sum_m pi_m mu_m."""
        return self.weights @ self.means

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Draw (n, 2) points."""
        which = rng.choice(self.components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covariances)
        noise = rng.standard_normal((n, 2))
        return self.means[which] + np.einsum("nij,nj->ni", chol[which], noise)


def gaussian_log_density(point: np.ndarray, mean: np.ndarray, covariance: np.ndarray) -> float:
    """log N(point; mean, covariance) for a 2x2 positive definite covariance."""
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as e:
        raise ParameterizationError("Covariance is not positive definite") from e
    diff = np.linalg.solve(chol, np.asarray(point, dtype=np.float64) - mean)
    return float(-LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * diff @ diff)


def gmm_log_density(point: np.ndarray, mixture: GmmStep) -> float:
    """log sum_m pi_m N(point; mu_m, Sigma_m), combined with log-sum-exp."""
    mixture.validate()
    terms = [
        np.log(w) + gaussian_log_density(point, mu, cov)
        for w, mu, cov in zip(mixture.weights, mixture.means, mixture.covariances)
    ]
    return float(np_logsumexp(terms))


def covariance_from_params(log_sigmas: np.ndarray, corrs: np.ndarray) -> np.ndarray:
    """(..., 2) log std devs and (...) correlations to (..., 2, 2) covariances."""
    sigmas = np.exp(log_sigmas)
    sx, sy = sigmas[..., 0], sigmas[..., 1]
    cov = np.empty(sigmas.shape[:-1] + (2, 2))
    cov[..., 0, 0] = sx * sx
    cov[..., 1, 1] = sy * sy
    cov[..., 0, 1] = cov[..., 1, 0] = corrs * sx * sy
    return cov


class MixtureParams(NamedTuple):
    """Tensor-valued GMM parameters, rows by components."""

    log_weights: Tensor
    means: Tensor
    log_sigmas: Tensor
    corrs: Tensor

    @property
    def components(self) -> int:
        """Number of mixture components M."""
        return self.log_weights.shape[-1]

    def to_steps(self) -> list[GmmStep]:
        """One numpy GmmStep per leading row."""
        weights = np.exp(self.log_weights.value)
        covs = covariance_from_params(self.log_sigmas.value, self.corrs.value)
        return [GmmStep(w, mu, cov) for w, mu, cov in zip(weights, self.means.value, covs)]


def split_mixture(raw: Tensor, components: int) -> MixtureParams:
    """Split a (R, 6M) head output into mixture parameters.

    Layout: M logits, 2M means, 2M log standard deviations, M raw correlations.
    """
    m = components
    rows = raw.shape[0]
    return MixtureParams(
        log_weights=ops.log_softmax(raw[:, :m], axis=-1),
        means=ops.reshape(raw[:, m : 3 * m], (rows, m, 2)),
        log_sigmas=ops.reshape(raw[:, 3 * m : 5 * m], (rows, m, 2)),
        corrs=ops.tanh(raw[:, 5 * m : 6 * m]) * CORR_LIMIT,
    )


def mixture_log_density(point: Any, params: MixtureParams) -> Tensor:
    """Row-wise log density of (R, 2) points under (R, M) mixtures."""
    point = ops.as_tensor(point)
    px = ops.reshape(point[:, 0], (-1, 1))
    py = ops.reshape(point[:, 1], (-1, 1))
    log_sx, log_sy = params.log_sigmas[:, :, 0], params.log_sigmas[:, :, 1]
    dx = (px - params.means[:, :, 0]) / ops.exp(log_sx)
    dy = (py - params.means[:, :, 1]) / ops.exp(log_sy)
    rho = params.corrs
    one_minus = 1.0 - ops.square(rho)
    quad = (ops.square(dx) - 2.0 * rho * dx * dy + ops.square(dy)) / one_minus
    log_n = -LOG_2PI - log_sx - log_sy - 0.5 * ops.log(one_minus) - 0.5 * quad
    return ops.logsumexp(params.log_weights + log_n, axis=-1)


def gaussian_log_density_entries(point: Any, mean: Tensor, sxx: Tensor, sxy: Tensor, syy: Tensor) -> Tensor:
    """Row-wise log N(point; mean, [[sxx, sxy], [sxy, syy]]) for (R, 2) points."""
    point = ops.as_tensor(point)
    dx = point[:, 0] - mean[:, 0]
    dy = point[:, 1] - mean[:, 1]
    det = sxx * syy - ops.square(sxy)
    quad = (syy * ops.square(dx) - 2.0 * sxy * dx * dy + sxx * ops.square(dy)) / det
    return -LOG_2PI - 0.5 * ops.log(det) - 0.5 * quad
