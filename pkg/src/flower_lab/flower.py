"""The three-step posterior-sampling iteration for linear inverse problems.

One iteration at time t = k/N:

  1. destination estimate   x1_hat = x_t + (1 - t) v(x_t, t)
  2. refinement             x1_tilde = mu_t + gamma * kappa_t, where mu_t
     solves (nu_t^-2 I + s^-2 H^T H) mu = nu_t^-2 x1_hat + s^-2 H^T y
     (the proximal step of the quadratic data term, scaled by nu_t^2) and
     kappa_t ~ N(0, Sigma_t) with Sigma_t the inverse of that same matrix
  3. time progression       x_{t+dt} = (1 - t - dt) eps + (t + dt) x1_tilde

The schedule runs k = 0..N-1, so the refinement never sees t = 1 and the
final progression lands on t = 1 exactly, returning x1_tilde unchanged.

All step functions accept a single state ``(d,)`` or a lockstep batch
``(n, d)``; ``run`` drives one trajectory, ``run_batch`` drives many in
parallel with shared per-step factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .flow import VelocityField
from .gmm import LinearGaussianObservation
from .operators import DENSE_SOLVE_CUTOFF, SpdSolveOptions, solve_spd

__all__ = [
    "FlowerConfig",
    "TrajectoryRecord",
    "FlowerRunError",
    "nu",
    "destination_estimate",
    "refine_mean",
    "sample_kappa",
    "refine",
    "time_progress",
    "run",
    "run_averaged",
    "run_batch",
    "run_rng",
]


def nu(t: float) -> float:
    """Destination-uncertainty schedule (1-t)/sqrt(t^2 + (1-t)^2).

    Decreases monotonically from 1 at t=0 to 0 at t=1.
    """
    return (1.0 - t) / np.sqrt(t * t + (1.0 - t) ** 2)


@dataclass(frozen=True)
class FlowerConfig:
    """Solver settings; the step size 1/n_steps is always derived."""

    n_steps: int
    gamma: int
    noise_std: float
    seed: int = 0
    n_avg: int = 1
    record_trajectory: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.gamma not in (0, 1):
            raise ValueError("gamma must be 0 or 1")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        if self.n_avg < 1:
            raise ValueError("n_avg must be >= 1")


@dataclass(frozen=True)
class TrajectoryRecord:
    """Per-step snapshots; arrays have one row per iteration, t[k] = k/N."""

    t: np.ndarray
    x_t: np.ndarray
    x1_hat: np.ndarray
    mu: np.ndarray
    x1_tilde: np.ndarray

    def __len__(self):
        return self.t.shape[0]


class FlowerRunError(RuntimeError):
    """A step of the iteration failed; carries the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step


class _ProxSolver:
    """Shared solve machinery for (nu_t^-2 I + s^-2 H^T H) z = rhs.

    Dense Cholesky for small systems (one factorization per time, shared
    across batch rows and across the mean/kappa solves of a step),
    matrix-free CG otherwise.
    """

    def __init__(self, obs: LinearGaussianObservation, opts: SpdSolveOptions | None):
        self.obs = obs
        self.opts = opts or SpdSolveOptions()
        self.inv_s2 = 1.0 / (obs.noise_std * obs.noise_std)
        d = obs.operator.in_dim
        self.dim = d
        self.gram_dense = (
            obs.operator.gram_matrix() if d <= DENSE_SOLVE_CUTOFF else None
        )
        self._factor_t = None
        self._factor = None

    def solve(self, rhs: np.ndarray, t: float) -> np.ndarray:
        inv_nu2 = 1.0 / nu(t) ** 2
        if self.gram_dense is not None:
            if self._factor_t != t:
                precision = inv_nu2 * np.eye(self.dim) + self.inv_s2 * self.gram_dense
                self._factor = cho_factor(precision, lower=True)
                self._factor_t = t
            if rhs.ndim == 1:
                return cho_solve(self._factor, rhs)
            return cho_solve(self._factor, rhs.T).T

        def matvec(v):
            return inv_nu2 * v + self.inv_s2 * self.obs.operator.gram_apply(v)

        if rhs.ndim == 1:
            return solve_spd(matvec, rhs, self.opts)
        return np.stack([solve_spd(matvec, row, self.opts) for row in rhs])


def destination_estimate(field: VelocityField, x_t, t: float) -> np.ndarray:
    """Step 1: the flow-consistent destination x_t + (1 - t) v(x_t, t)."""
    x_t = np.asarray(x_t, dtype=float)
    if t == 1.0:
        return x_t.copy()
    return x_t + (1.0 - t) * field.eval(x_t, t)


def refine_mean(
    x1_hat,
    obs: LinearGaussianObservation,
    t: float,
    solver: SpdSolveOptions | None = None,
) -> np.ndarray:
    """Step 2 mean: the proximal point balancing x1_hat against the data."""
    if t >= 1.0:
        raise ValueError("refinement requires t < 1 (nu_t > 0)")
    x1_hat = np.asarray(x1_hat, dtype=float)
    return _ProxSolver(obs, solver).solve(_refine_rhs(x1_hat, obs, t), t)


def _refine_rhs(x1_hat, obs, t):
    hty = obs.operator.apply_adjoint(obs.observation)
    return x1_hat / nu(t) ** 2 + hty / (obs.noise_std**2)


def sample_kappa(
    obs: LinearGaussianObservation,
    t: float,
    rng: np.random.Generator,
    size: int | None = None,
    solver: SpdSolveOptions | None = None,
) -> np.ndarray:
    """Draw kappa_t ~ N(0, Sigma_t) by the two-noise construction.

    Draws eps1 on the signal side and eps2 on the measurement side (in that
    order), then applies Sigma_t to nu_t^-1 eps1 + s^-1 H^T eps2 via the
    SPD solve on the precision.
    """
    if t >= 1.0:
        raise ValueError("kappa is defined for t < 1 (nu_t > 0)")
    d, m = obs.operator.in_dim, obs.operator.out_dim
    shape1 = (d,) if size is None else (size, d)
    shape2 = (m,) if size is None else (size, m)
    eps1 = rng.standard_normal(shape1)
    eps2 = rng.standard_normal(shape2)
    rhs = eps1 / nu(t) + obs.operator.apply_adjoint(eps2) / obs.noise_std
    return _ProxSolver(obs, solver).solve(rhs, t)


def refine(
    x1_hat,
    obs: LinearGaussianObservation,
    t: float,
    gamma: int,
    rng: np.random.Generator,
    solver: SpdSolveOptions | None = None,
) -> np.ndarray:
    """Step 2: refinement mean plus, for gamma = 1, a covariance draw.

    With gamma = 0 no random numbers are consumed, so the gamma = 1 output
    differs from the gamma = 0 output by exactly one kappa draw.
    """
    mean = refine_mean(x1_hat, obs, t, solver)
    if gamma == 0:
        return mean
    size = None if mean.ndim == 1 else mean.shape[0]
    return mean + sample_kappa(obs, t, rng, size=size, solver=solver)


def time_progress(x1_tilde, t: float, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Step 3: re-project onto the flow path with fresh source noise.

    Returns (1 - t - dt) eps + (t + dt) x1_tilde; when t + dt is exactly 1
    the noise coefficient is exactly zero and the refinement passes through
    bit-for-bit (the draw is still consumed to keep the stream uniform).
    """
    x1_tilde = np.asarray(x1_tilde, dtype=float)
    s = t + dt
    if s > 1.0:
        raise ValueError(f"t + dt = {s} exceeds 1")
    eps = rng.standard_normal(x1_tilde.shape)
    return (1.0 - s) * eps + s * x1_tilde


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Independent per-run stream, order-insensitive in run_index."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(run_index,))
    )


def _solver_obs(obs: LinearGaussianObservation, cfg: FlowerConfig):
    """The observation as the solver sees it: cfg.noise_std wins."""
    if cfg.noise_std == obs.noise_std:
        return obs
    return replace(obs, noise_std=cfg.noise_std)


def _iterate(field, obs, cfg, rng, x, record):
    """Shared driver for single and batched runs; x is (d,) or (n, d)."""
    n_steps = cfg.n_steps
    snapshots = [] if record else None
    solver = _ProxSolver(obs, None)
    for k in range(n_steps):
        t = k / n_steps
        dt = (k + 1) / n_steps - t
        try:
            x1_hat = destination_estimate(field, x, t)
            mu = solver.solve(_refine_rhs(x1_hat, obs, t), t)
            if cfg.gamma == 1:
                size = None if mu.ndim == 1 else mu.shape[0]
                x1_tilde = mu + _kappa_from(solver, obs, t, rng, size)
            else:
                x1_tilde = mu
            if record:
                snapshots.append((t, x.copy(), x1_hat, mu, x1_tilde))
            x = time_progress(x1_tilde, t, dt, rng)
        except FlowerRunError:
            raise
        except Exception as exc:
            raise FlowerRunError(k, exc) from exc
    if record:
        ts, xts, hats, mus, tildes = (np.stack(cols) for cols in zip(*snapshots))
        return x, TrajectoryRecord(ts, xts, hats, mus, tildes)
    return x, None


def _kappa_from(solver, obs, t, rng, size):
    d, m = obs.operator.in_dim, obs.operator.out_dim
    eps1 = rng.standard_normal((d,) if size is None else (size, d))
    eps2 = rng.standard_normal((m,) if size is None else (size, m))
    rhs = eps1 / nu(t) + obs.operator.apply_adjoint(eps2) / obs.noise_std
    return solver.solve(rhs, t)


def run(
    field: VelocityField,
    obs: LinearGaussianObservation,
    cfg: FlowerConfig,
    rng: np.random.Generator | None = None,
):
    """One full trajectory from fresh source noise to a posterior draw.

    Returns x1, or (x1, TrajectoryRecord) when cfg.record_trajectory.
    """
    obs = _solver_obs(obs, cfg)
    if rng is None:
        rng = run_rng(cfg.seed, 0)
    x0 = rng.standard_normal(obs.operator.in_dim)
    x1, record = _iterate(field, obs, cfg, rng, x0, cfg.record_trajectory)
    if cfg.record_trajectory:
        return x1, record
    return x1


def run_averaged(
    field: VelocityField, obs: LinearGaussianObservation, cfg: FlowerConfig
) -> np.ndarray:
    """Coordinate-wise mean over cfg.n_avg independent runs.

    A point estimator, not a posterior sample: averaging collapses the
    spread that gamma = 1 deliberately preserves.  Per-run streams are
    derived from (seed, run_index), so the result does not depend on
    execution order.
    """
    base = replace(cfg, record_trajectory=False)
    outs = [
        run(field, obs, base, rng=run_rng(cfg.seed, i)) for i in range(cfg.n_avg)
    ]
    return np.mean(outs, axis=0)


def run_batch(
    field: VelocityField,
    obs: LinearGaussianObservation,
    cfg: FlowerConfig,
    n_runs: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """n_runs lockstep trajectories sharing per-step factorizations.

    Statistically identical to n_runs independent `run` calls but drawing
    from one batch stream; deterministic given (cfg.seed, n_runs).
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    obs = _solver_obs(obs, cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x0 = rng.standard_normal((n_runs, obs.operator.in_dim))
    x1, _ = _iterate(field, obs, cfg, rng, x0, record=False)
    return x1
