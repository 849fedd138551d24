"""Gaussian mixtures with shared covariance and their closed-form conditionals.

This module is the exact-reference layer of the lab: the mixture prior, the
posterior under a linear-Gaussian measurement, the straight-line-path
marginal at time t, and the conditional expectation E[X1 | Xt = x] whose
algebra doubles as the exact velocity field.

Everything is computed in log space wherever mixture responsibilities
appear: component densities underflow long before the math stops being
well-conditioned, especially near t = 1 where the path covariance shrinks
like (1-t)^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve, solve_triangular
from scipy.special import logsumexp

from .operators import LinearOperator, as_vector

__all__ = [
    "GaussianMixture",
    "LinearGaussianObservation",
    "posterior_linear_gaussian",
    "marginal_at_time",
    "conditional_mean_x1",
    "analytic_velocity",
]

_WEIGHT_TOL = 1e-12


class GaussianMixture:
    """Mixture of K Gaussians with one shared covariance.

    Attributes:
        weights: Mixture weights, shape ``(K,)``, nonnegative, summing to 1.
        means: Component means, shape ``(K, d)``.
        covariance: Shared covariance, shape ``(d, d)``; a scalar argument
            is expanded to an isotropic matrix.
    """

    def __init__(self, weights, means, covariance):
        self.weights = np.array(weights, dtype=float)
        self.means = np.atleast_2d(np.array(means, dtype=float))
        if self.weights.ndim != 1 or self.weights.shape[0] != self.means.shape[0]:
            raise ValueError("weights and means disagree on component count")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.means))):
            raise ValueError("weights and means must be finite")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")
        d = self.means.shape[1]
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be ({d}, {d}), got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        try:
            self._chol = cholesky(cov, lower=True)
        except Exception as exc:
            raise ValueError("covariance is not positive definite") from exc
        self.covariance = cov
        self._log_det = 2.0 * np.log(np.diag(self._chol)).sum()
        for arr in (self.weights, self.means, self.covariance):
            arr.flags.writeable = False

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, x) -> np.ndarray:
        """log[w_k N(x; mu_k, Sigma)] for each k; shape (..., K)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[-1]}, expected {self.dim}")
        diff = x[..., None, :] - self.means  # (..., K, d)
        sol = _solve_lower(self._chol, diff)
        maha = np.sum(sol * sol, axis=-1)
        log_norm = -0.5 * (self.dim * np.log(2.0 * np.pi) + self._log_det)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return log_w + log_norm - 0.5 * maha

    def log_density(self, x):
        """Mixture log-density via log-sum-exp; scalar for (d,), (n,) for (n, d)."""
        return logsumexp(self.component_log_densities(x), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw n i.i.d. samples: categorical component, then Cholesky noise."""
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + z @ self._chol.T

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def full_covariance(self) -> np.ndarray:
        """Covariance of the mixture (shared part plus mean spread)."""
        m = self.mean()
        centered = self.means - m
        spread = (self.weights[:, None] * centered).T @ centered
        return self.covariance + spread


def _solve_lower(chol_lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L z = rhs row-wise for lower-triangular L; rhs (..., d)."""
    flat = rhs.reshape(-1, rhs.shape[-1])
    out = solve_triangular(chol_lower, flat.T, lower=True).T
    return out.reshape(rhs.shape)


@dataclass(frozen=True)
class LinearGaussianObservation:
    """A measurement y = Hx + noise with isotropic Gaussian noise."""

    operator: LinearOperator
    noise_std: float
    observation: np.ndarray

    def __post_init__(self):
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        y = as_vector(self.observation, dim=self.operator.out_dim, name="observation")
        y.flags.writeable = False
        object.__setattr__(self, "observation", y)


def posterior_linear_gaussian(
    prior: GaussianMixture, obs: LinearGaussianObservation
) -> GaussianMixture:
    """Exact posterior of a shared-covariance GMM under a linear measurement.

    The posterior is again a GMM with shared covariance:

        Sigma_post = (Sigma^-1 + H^T H / s^2)^-1
        mu_k_post  = Sigma_post (H^T y / s^2 + Sigma^-1 mu_k)
        w_k_post   ~ w_k N(y; H mu_k, H Sigma H^T + s^2 I)

    with s the noise standard deviation and weights normalized in log space.
    """
    d = prior.dim
    h_dense = obs.operator.dense_matrix()
    inv_s2 = 1.0 / (obs.noise_std * obs.noise_std)
    prior_precision = cho_solve(cho_factor(prior.covariance, lower=True), np.eye(d))
    precision_post = prior_precision + inv_s2 * obs.operator.gram_matrix()
    cov_post = cho_solve(cho_factor(precision_post, lower=True), np.eye(d))
    cov_post = 0.5 * (cov_post + cov_post.T)

    hty = obs.operator.apply_adjoint(obs.observation)
    means_post = (inv_s2 * hty + prior.means @ prior_precision.T) @ cov_post.T

    # marginal likelihood of y under each component
    m = obs.operator.out_dim
    if m == 0:
        with np.errstate(divide="ignore"):
            log_w = np.log(prior.weights)
    else:
        y_cov = h_dense @ prior.covariance @ h_dense.T + (
            obs.noise_std * obs.noise_std
        ) * np.eye(m)
        y_chol = cholesky(y_cov, lower=True)
        resid = obs.observation - prior.means @ h_dense.T  # (K, M)
        sol = _solve_lower(y_chol, resid)
        maha = np.sum(sol * sol, axis=-1)
        log_det = 2.0 * np.log(np.diag(y_chol)).sum()
        with np.errstate(divide="ignore"):
            log_w = np.log(prior.weights) - 0.5 * (
                maha + log_det + m * np.log(2.0 * np.pi)
            )
    log_w = log_w - logsumexp(log_w)
    return GaussianMixture(np.exp(log_w), means_post, cov_post)


def marginal_at_time(prior: GaussianMixture, t: float) -> GaussianMixture:
    """Law of X_t = (1-t) X_0 + t X_1 for standard-normal X_0 independent of X_1.

    Means scale to t mu_k and the shared covariance becomes
    t^2 Sigma + (1-t)^2 I; weights are unchanged.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    d = prior.dim
    cov = (t * t) * prior.covariance + ((1.0 - t) ** 2) * np.eye(d)
    return GaussianMixture(prior.weights, t * prior.means, cov)


def _path_responsibility_terms(prior: GaussianMixture, x: np.ndarray, t: float):
    """Shared pieces of the conditional mean: responsibilities and slopes.

    Returns (log_resp (..., K), comp_means (..., K, d)) where comp_means[k]
    is the per-component conditional mean mu_k + t Sigma S^-1 (x - t mu_k)
    with S = t^2 Sigma + (1-t)^2 I the path covariance.
    """
    d = prior.dim
    path_cov = (t * t) * prior.covariance + ((1.0 - t) ** 2) * np.eye(d)
    path_chol = cholesky(path_cov, lower=True)
    # regression slope A = t Sigma S^-1, computed once per (prior, t)
    slope = t * solve(path_cov, prior.covariance, assume_a="pos").T

    diff = x[..., None, :] - t * prior.means  # (..., K, d)
    sol = _solve_lower(path_chol, diff)
    maha = np.sum(sol * sol, axis=-1)
    # the shared normalizing constant cancels once responsibilities are normalized
    with np.errstate(divide="ignore"):
        log_resp = np.log(prior.weights) - 0.5 * maha
    log_resp = log_resp - logsumexp(log_resp, axis=-1, keepdims=True)
    comp_means = prior.means + diff @ slope.T
    return log_resp, comp_means


def conditional_mean_x1(prior: GaussianMixture, x, t: float) -> np.ndarray:
    """E[X1 | Xt = x] along the straight-line path with independent coupling.

    Valid for 0 <= t < 1; at t = 1 the conditional law degenerates to the
    point mass at x, so callers should use x directly there.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must be in [0, 1), got {t}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != prior.dim:
        raise ValueError(f"x has dimension {x.shape[-1]}, expected {prior.dim}")
    log_resp, comp_means = _path_responsibility_terms(prior, x, t)
    resp = np.exp(log_resp)
    return np.sum(resp[..., None] * comp_means, axis=-2)


def analytic_velocity(prior: GaussianMixture, x, t: float) -> np.ndarray:
    """The exact CFM-optimal velocity (E[X1 | Xt = x] - x) / (1 - t)."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"t must be in [0, 1), got {t}")
    x = np.asarray(x, dtype=float)
    return (conditional_mean_x1(prior, x, t) - x) / (1.0 - t)
