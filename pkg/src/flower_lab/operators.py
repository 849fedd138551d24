"""Linear forward operators with exact adjoints and SPD solves.

Every operator maps R^d -> R^M and exposes three actions: ``apply`` (Hx),
``apply_adjoint`` (H^T u) and ``gram_apply`` (H^T H x).  Adjoints are coded
by hand, not differentiated, so the pairing ``<Hx, u> == <x, H^T u>`` holds
to rounding for all variants.  All actions accept a single vector ``(d,)``
or a row-wise batch ``(n, d)``.

Operators are immutable after construction and safe to share across
threads; every action is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "LinearOperator",
    "DenseOperator",
    "RowVectorOperator",
    "MaskOperator",
    "Circulant1DOperator",
    "ScaledIdentityOperator",
    "SpdSolveOptions",
    "SpdSolveError",
    "as_vector",
    "solve_spd",
]

# Dense Cholesky beats matrix-free CG up to roughly this many unknowns;
# also the cutoff below which solve_spd will use a provided dense matrix.
DENSE_SOLVE_CUTOFF = 64


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float array, optionally checking its length."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {dim}")
    return arr


def _check_last_dim(x, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim not in (1, 2):
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[-1] != dim:
        raise ValueError(
            f"{name} has trailing dimension {arr.shape[-1]}, expected {dim}"
        )
    return arr


class LinearOperator:
    """Base class: a linear map H: R^in_dim -> R^out_dim with exact adjoint."""

    in_dim: int
    out_dim: int

    def apply(self, x) -> np.ndarray:
        """Return Hx; batched row-wise for 2-D input."""
        x = _check_last_dim(x, self.in_dim, "x")
        return self._apply(x)

    def apply_adjoint(self, u) -> np.ndarray:
        """Return H^T u; batched row-wise for 2-D input."""
        u = _check_last_dim(u, self.out_dim, "u")
        return self._apply_adjoint(u)

    def gram_apply(self, x) -> np.ndarray:
        """Return H^T H x, exploiting operator structure where possible."""
        x = _check_last_dim(x, self.in_dim, "x")
        return self._gram_apply(x)

    def dense_matrix(self) -> np.ndarray:
        """Materialize H as an (out_dim, in_dim) array."""
        raise NotImplementedError

    def gram_matrix(self) -> np.ndarray:
        """Materialize H^T H as an (in_dim, in_dim) array."""
        a = self.dense_matrix()
        return a.T @ a

    # subclass hooks, inputs already validated
    def _apply(self, x):
        raise NotImplementedError

    def _apply_adjoint(self, u):
        raise NotImplementedError

    def _gram_apply(self, x):
        return self._apply_adjoint(self._apply(x))


class DenseOperator(LinearOperator):
    """Explicit matrix operator."""

    def __init__(self, matrix):
        a = np.array(matrix, dtype=float)
        if a.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix contains NaN or Inf")
        a.flags.writeable = False
        self.matrix = a
        self.out_dim, self.in_dim = a.shape

    def _apply(self, x):
        return x @ self.matrix.T

    def _apply_adjoint(self, u):
        return u @ self.matrix

    def dense_matrix(self):
        return np.array(self.matrix)


class RowVectorOperator(LinearOperator):
    """Single-row operator h^T: R^d -> R^1 (one scalar measurement)."""

    def __init__(self, h):
        self.h = as_vector(h, name="h")
        self.h.flags.writeable = False
        self.in_dim = self.h.shape[0]
        self.out_dim = 1

    def _apply(self, x):
        y = x @ self.h
        return y[..., None] if np.ndim(y) else np.array([y])

    def _apply_adjoint(self, u):
        return u[..., 0, None] * self.h

    def _gram_apply(self, x):
        # h (h^T x) without forming the rank-one matrix
        y = x @ self.h
        return np.multiply.outer(y, self.h) if np.ndim(y) else y * self.h

    def dense_matrix(self):
        return self.h[None, :].copy()

    def gram_matrix(self):
        return np.outer(self.h, self.h)


class MaskOperator(LinearOperator):
    """Coordinate selection: keeps the listed indices, drops the rest.

    The adjoint zero-fills removed coordinates, and H^T H is the 0/1
    diagonal projector onto the kept set.  An empty kept set is allowed
    and yields the zero operator (no data term).
    """

    def __init__(self, kept, dim: int):
        kept_arr = np.asarray(sorted(set(int(k) for k in kept)), dtype=int)
        if kept_arr.size and (kept_arr[0] < 0 or kept_arr[-1] >= dim):
            raise ValueError(f"kept indices must lie in [0, {dim})")
        self.kept = kept_arr
        self.kept.flags.writeable = False
        self.in_dim = int(dim)
        self.out_dim = int(kept_arr.size)
        indicator = np.zeros(dim)
        indicator[kept_arr] = 1.0
        indicator.flags.writeable = False
        self._indicator = indicator

    def _apply(self, x):
        return x[..., self.kept]

    def _apply_adjoint(self, u):
        out = np.zeros(u.shape[:-1] + (self.in_dim,))
        out[..., self.kept] = u
        return out

    def _gram_apply(self, x):
        return x * self._indicator

    def dense_matrix(self):
        m = np.zeros((self.out_dim, self.in_dim))
        m[np.arange(self.out_dim), self.kept] = 1.0
        return m

    def gram_matrix(self):
        return np.diag(self._indicator)


class Circulant1DOperator(LinearOperator):
    """Circular convolution with a fixed kernel (periodic boundary).

    Row i of the dense matrix is the kernel cyclically shifted by i, so
    apply/adjoint/gram all diagonalize in Fourier space; the spectral form
    of the Gram action is |FFT(kernel)|^2 applied coordinate-wise.
    """

    def __init__(self, kernel):
        self.kernel = as_vector(kernel, name="kernel")
        self.kernel.flags.writeable = False
        self.in_dim = self.out_dim = self.kernel.shape[0]
        self._spectrum = np.fft.rfft(self.kernel)
        self._spectrum.flags.writeable = False

    def _apply(self, x):
        return np.fft.irfft(np.fft.rfft(x) * self._spectrum, n=self.in_dim)

    def _apply_adjoint(self, u):
        return np.fft.irfft(np.fft.rfft(u) * self._spectrum.conj(), n=self.in_dim)

    def _gram_apply(self, x):
        power = self._spectrum.real**2 + self._spectrum.imag**2
        return np.fft.irfft(np.fft.rfft(x) * power, n=self.in_dim)

    def dense_matrix(self):
        d = self.in_dim
        return np.column_stack([np.roll(self.kernel, j) for j in range(d)])


class ScaledIdentityOperator(LinearOperator):
    """c * I on R^d."""

    def __init__(self, scale: float, dim: int):
        if not np.isfinite(scale):
            raise ValueError("scale must be finite")
        self.scale = float(scale)
        self.in_dim = self.out_dim = int(dim)

    def _apply(self, x):
        return self.scale * x

    def _apply_adjoint(self, u):
        return self.scale * u

    def _gram_apply(self, x):
        return (self.scale * self.scale) * x

    def dense_matrix(self):
        return self.scale * np.eye(self.in_dim)


@dataclass(frozen=True)
class SpdSolveOptions:
    """Tolerances for the conjugate-gradient SPD solve.

    ``max_iterations=None`` means the 10*d default is picked at solve time.
    """

    rel_tolerance: float = 1e-10
    max_iterations: int | None = None

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be > 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


class SpdSolveError(RuntimeError):
    """CG failed to reach the requested residual within the iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def solve_spd(
    matvec: Callable[[np.ndarray], np.ndarray],
    b,
    opts: SpdSolveOptions | None = None,
    dense_matrix: np.ndarray | None = None,
) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A given by ``matvec``.

    Uses conjugate gradients from a zero start; when ``dense_matrix`` is
    supplied and the system is small (d <= 64) a dense Cholesky solve is
    used instead.  The returned x satisfies
    ``||matvec(x) - b|| <= rel_tolerance * ||b||``.

    Raises:
        SpdSolveError: CG did not converge within ``max_iterations``
            (the error carries the final residual norm).
    """
    opts = opts or SpdSolveOptions()
    b = as_vector(b, name="b")
    d = b.shape[0]
    if dense_matrix is not None and d <= DENSE_SOLVE_CUTOFF:
        return cho_solve(cho_factor(dense_matrix, lower=True), b)

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros(d)
    max_iter = opts.max_iterations if opts.max_iterations is not None else 10 * d
    tol = opts.rel_tolerance * b_norm

    x = np.zeros(d)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for it in range(1, max_iter + 1):
        if np.sqrt(rs) <= tol:
            break
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        if it % 50 == 0:
            # refresh the true residual; the recurrence drifts over long runs
            r = b - matvec(x)
        else:
            r -= alpha * ap
        rs_new = float(r @ r)
        p *= rs_new / rs
        p += r
        rs = rs_new
    # recompute the true residual: the recurrence drifts over many iterations
    residual = float(np.linalg.norm(matvec(x) - b))
    if residual > tol:
        raise SpdSolveError(
            f"CG stalled at residual {residual:.3e} (target {tol:.3e}) "
            f"after {max_iter} iterations",
            residual=residual,
            iterations=max_iter,
        )
    return x


OPERATOR_VARIANTS = {
    "dense": DenseOperator,
    "row_vector": RowVectorOperator,
    "mask": MaskOperator,
    "circulant1d": Circulant1DOperator,
    "scaled_identity": ScaledIdentityOperator,
}
