"""Velocity fields, Euler sampling, couplings and conditional flow-matching.

The two field implementations share one interface: ``eval(x, t)`` returns
the drift at scalar time t for a single point ``(d,)`` or a batch
``(n, d)``.  Training regresses the network onto the straight-line residual
x1 - x0 at uniformly random times; the trainer is deterministic given its
seed (fixed draw order, single-threaded reductions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gmm import GaussianMixture, analytic_velocity
from .mlp import Mlp, MlpWorkspace

__all__ = [
    "VelocityField",
    "AnalyticGmmField",
    "MlpField",
    "euler_sample",
    "IndependentCoupling",
    "MinibatchOTCoupling",
    "pair_batch",
    "cfm_loss",
    "TrainConfig",
    "TrainingDivergedError",
    "train_cfm",
    "standard_normal_sampler",
]

# the exact field has a removable singularity at t = 1; evaluation clamps here
_T_CLAMP = 1.0 - 1e-9


class VelocityField:
    """Interface: a time-dependent drift on R^d."""

    dim: int

    def eval(self, x, t: float) -> np.ndarray:
        raise NotImplementedError


class AnalyticGmmField(VelocityField):
    """The exact CFM-optimal field for a Gaussian-mixture target.

    Evaluation at t = 1 is defined by continuity as evaluation at
    1 - 1e-9, which is all the samplers ever need.
    """

    def __init__(self, prior: GaussianMixture):
        self.prior = prior
        self.dim = prior.dim

    def eval(self, x, t: float) -> np.ndarray:
        return analytic_velocity(self.prior, x, min(float(t), _T_CLAMP))


class MlpField(VelocityField):
    """A trained network viewed as a velocity field; time is the last input."""

    def __init__(self, mlp: Mlp):
        if mlp.in_dim != mlp.out_dim + 1:
            raise ValueError(
                f"network maps {mlp.in_dim} -> {mlp.out_dim}; expected d+1 -> d"
            )
        self.mlp = mlp
        self.dim = mlp.out_dim

    def eval(self, x, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=self.mlp.dtype)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        inp = np.concatenate(
            [xb, np.full((xb.shape[0], 1), t, dtype=self.mlp.dtype)], axis=1
        )
        out = self.mlp.forward(inp)
        return out[0] if single else out


def euler_sample(field: VelocityField, x0, n_steps: int, record_trajectory=False):
    """Integrate dx/dt = v(x, t) from t=0 to t=1 with fixed-step Euler.

    Accepts a single start point ``(d,)`` or a batch ``(n, d)``.  With
    ``record_trajectory`` the return value is ``(x1, states)`` where states
    has n_steps + 1 entries including the start.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.array(x0, dtype=float)
    states = [x.copy()] if record_trajectory else None
    for k in range(n_steps):
        t = k / n_steps
        dt = (k + 1) / n_steps - t
        x += dt * field.eval(x, t)
        if record_trajectory:
            states.append(x.copy())
    if record_trajectory:
        return x, np.stack(states)
    return x


class IndependentCoupling:
    """Keep the two independently drawn batches paired as given."""

    def pair(self, x0s, x1s, rng=None):
        x0s = np.asarray(x0s, dtype=float)
        x1s = np.asarray(x1s, dtype=float)
        if x0s.shape != x1s.shape:
            raise ValueError(f"batch shapes differ: {x0s.shape} vs {x1s.shape}")
        return x0s, x1s


class MinibatchOTCoupling:
    """Pair the batch by an exact minimum-cost matching under squared distance.

    Exact assignment replaces the entropically regularized plan: it is
    deterministic, dependency-free and verifiable against brute force at
    small batch sizes.
    """

    def pair(self, x0s, x1s, rng=None):
        x0s = np.asarray(x0s, dtype=float)
        x1s = np.asarray(x1s, dtype=float)
        if x0s.shape != x1s.shape:
            raise ValueError(f"batch shapes differ: {x0s.shape} vs {x1s.shape}")
        perm = self.assignment(x0s, x1s)
        return x0s, x1s[perm]

    @staticmethod
    def assignment(x0s, x1s) -> np.ndarray:
        """The optimal permutation: row i of x0s pairs with x1s[perm[i]]."""
        sq0 = np.sum(x0s * x0s, axis=1)[:, None]
        sq1 = np.sum(x1s * x1s, axis=1)[None, :]
        cost = sq0 + sq1 - 2.0 * (x0s @ x1s.T)
        _, cols = linear_sum_assignment(cost)
        return cols


def pair_batch(coupling, x0s, x1s, rng=None):
    """Apply a coupling to two equal-size batches, returning paired rows."""
    return coupling.pair(x0s, x1s, rng)


def pairing_cost(x0s, x1s) -> float:
    """Total squared distance of a pairing, row i against row i."""
    diff = np.asarray(x1s, dtype=float) - np.asarray(x0s, dtype=float)
    return float(np.sum(diff * diff))


def cfm_loss(mlp: Mlp, x0s, x1s, ts):
    """Conditional flow-matching loss and parameter gradients on one batch.

    Interpolates x_t = (1 - t) x0 + t x1, feeds (x_t, t) through the
    network and regresses onto x1 - x0.  Returns (loss, grads) with grads
    a list of (dW, db) pairs aligned with the network layers.
    """
    x0s = np.asarray(x0s, dtype=mlp.dtype)
    x1s = np.asarray(x1s, dtype=mlp.dtype)
    ts = np.asarray(ts, dtype=mlp.dtype).reshape(-1)
    if x0s.shape != x1s.shape or x0s.shape[0] != ts.shape[0]:
        raise ValueError("batch shapes disagree")
    if np.any(ts < 0) or np.any(ts > 1):
        raise ValueError("times must lie in [0, 1]")
    n, d = x0s.shape
    tcol = ts[:, None]
    inp = np.concatenate([(1.0 - tcol) * x0s + tcol * x1s, tcol], axis=1)
    ws = MlpWorkspace(mlp, n)
    loss = ws.loss_and_grad(inp, x1s - x0s)
    grads = [(dw.copy(), db.copy()) for dw, db in zip(ws.grad_w, ws.grad_b)]
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the CFM trainer."""

    batch_size: int = 2048
    steps: int = 20000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    hidden_sizes: tuple = (256, 256)
    # float32 keeps the full-scale run inside its time budget; checkpoints
    # and returned fields are always float64
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.batch_size, self.steps) < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


def standard_normal_sampler(dim: int):
    """Sampler closure for the standard-normal source on R^dim."""

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, dim))

    return sample


def train_cfm(target_sampler, source_sampler, coupling, cfg: TrainConfig, dim: int = 2):
    """Train the velocity network with Adam on the CFM objective.

    Per step, in this fixed order: draw the target batch, the source batch
    and the times from one generator seeded by ``cfg.seed``, pair the batch
    through ``coupling``, then take one Adam step.  Returns
    ``(MlpField, losses)`` where the field holds float64 parameters and
    losses has one entry per step.

    Raises:
        TrainingDivergedError: the loss became NaN/Inf (step index attached).
    """
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    sizes = [dim + 1, *cfg.hidden_sizes, dim]
    mlp = Mlp.initialize(sizes, rng, dtype=dt)
    ws = MlpWorkspace(mlp, cfg.batch_size)

    adam_m = [np.zeros_like(g) for g in ws.grad_w + ws.grad_b]
    adam_v = [np.zeros_like(g) for g in ws.grad_w + ws.grad_b]
    params = mlp.weights + mlp.biases
    grads = ws.grad_w + ws.grad_b
    upd = [np.empty_like(g) for g in grads]

    n, d = cfg.batch_size, dim
    inp = np.empty((n, d + 1), dt)
    target = np.empty((n, d), dt)
    losses = np.empty(cfg.steps)

    one = np.float64(1.0)
    for step in range(cfg.steps):
        x1 = target_sampler(rng, n)
        x0 = source_sampler(rng, n)
        ts = rng.random(n)
        x0, x1 = coupling.pair(x0, x1, rng)

        tcol = ts[:, None]
        np.multiply(x0, one - tcol, out=inp[:, :d], casting="unsafe")
        inp[:, :d] += tcol * x1
        inp[:, d] = ts
        np.subtract(x1, x0, out=target, casting="unsafe")

        loss = ws.loss_and_grad(inp, target)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        losses[step] = loss

        # Adam with bias correction
        b1t = 1.0 - cfg.beta1 ** (step + 1)
        b2t = 1.0 - cfg.beta2 ** (step + 1)
        scale = cfg.learning_rate / b1t
        for p, g, m, v, u in zip(params, grads, adam_m, adam_v, upd):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            np.multiply(g, g, out=u)
            v += (1.0 - cfg.beta2) * u
            np.sqrt(v, out=u)
            u /= np.sqrt(b2t)
            u += cfg.epsilon
            np.divide(m, u, out=u)
            u *= scale
            p -= u

    return MlpField(mlp.astype(np.float64)), losses
