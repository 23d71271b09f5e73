"""Gaussian-process regression backend.

A fitted :class:`GpPosterior` is immutable: it owns a Cholesky factorization
of the regularized Gram matrix and answers mean/covariance queries. Kernel
family is fixed to Matérn-3/2 plus a white-noise term; hyperparameters are
never learned here, they come in through :class:`KernelSpec`.

Batched query methods (``mean_many`` and friends) are the intended hot path;
the scalar wrappers exist to keep call sites readable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from . import _kernels
from .errors import FactorizationError, NumericalVarianceError

# Fraction of signal variance below which a negative variance is treated as
# round-off and clamped to zero; anything more negative raises.
VAR_CLAMP_REL = 1e-9


@dataclass(frozen=True)
class KernelSpec:
    """Matérn-3/2 kernel parameters plus the observation-noise level.

    ``jitter`` is added to Gram diagonals for factorization stability and is
    treated as extra white noise everywhere, so identities that relate a
    fitted posterior to a refit stay exact. Defaults to 1e-8 * signal_variance.
    """

    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    smoothness: float = 1.5
    jitter: Optional[float] = None

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if self.smoothness != 1.5:
            raise ValueError("only the Matérn-3/2 kernel is supported (smoothness=1.5)")
        if self.jitter is None:
            object.__setattr__(self, "jitter", 1e-8 * self.signal_variance)
        elif not self.jitter > 0:
            raise ValueError(f"jitter must be > 0, got {self.jitter}")

    @property
    def effective_noise(self) -> float:
        """White-noise variance actually used in factorizations."""
        return self.noise_variance + self.jitter


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box domain."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D vectors of equal length")
        if not np.all(lo < hi):
            raise ValueError("box requires lower[j] < upper[j] for all j")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, dim: int) -> "DomainBox":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass(frozen=True)
class Dataset:
    """Observed inputs and scalar outputs, in matching order."""

    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if pts.shape[0] != vals.shape[0]:
            raise ValueError(
                f"points ({pts.shape[0]}) and values ({vals.shape[0]}) differ in length")
        object.__setattr__(self, "points", np.ascontiguousarray(pts))
        object.__setattr__(self, "values", np.ascontiguousarray(vals))

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.empty((0, dim)), np.empty(0))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def appended(self, points: np.ndarray, values: np.ndarray) -> "Dataset":
        points = np.atleast_2d(points)
        return Dataset(np.vstack([self.points, points]),
                       np.concatenate([self.values, np.atleast_1d(values)]))


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Matérn-3/2 covariance between two points."""
    a = np.atleast_2d(np.asarray(x, dtype=float))
    b = np.atleast_2d(np.asarray(x2, dtype=float))
    return float(_kernels.matern_cross(a, b, spec.length_scale, spec.signal_variance)[0, 0])


class GpPosterior:
    """Fitted Gaussian-process posterior (immutable).

    With empty data the posterior reduces to the prior: zero mean, kernel
    covariance. Use :func:`fit_posterior` to construct.
    """

    def __init__(self, kernel: KernelSpec, data: Dataset,
                 chol_lower: Optional[np.ndarray], alpha: Optional[np.ndarray]):
        self.kernel = kernel
        self.data = data
        self._chol = chol_lower
        self._alpha = alpha
        # perf cache for fixed prediction grids; harmless to rebuild on races
        self._grid_cache: dict = {}

    # -- internals ---------------------------------------------------------

    def _kt(self, x: np.ndarray) -> np.ndarray:
        """Kernel matrix between the training points and query points, (n, P)."""
        return _kernels.matern_cross(self.data.points, np.atleast_2d(x),
                                     self.kernel.length_scale,
                                     self.kernel.signal_variance)

    def _half_solve(self, rhs: np.ndarray) -> np.ndarray:
        """L^-1 rhs for the Gram factor L."""
        return solve_triangular(self._chol, rhs, lower=True, check_finite=False)

    def _half_solve_t(self, rhs: np.ndarray) -> np.ndarray:
        """L^-T rhs, completing a full solve from a half solve."""
        return solve_triangular(self._chol, rhs, lower=True, trans="T",
                                check_finite=False)

    def _full_solve(self, rhs: np.ndarray) -> np.ndarray:
        """(K + effective_noise I)^-1 rhs."""
        return cho_solve((self._chol, True), rhs, check_finite=False)

    def _clamp_var(self, var: np.ndarray) -> np.ndarray:
        floor = -VAR_CLAMP_REL * self.kernel.signal_variance
        if np.any(var < floor):
            worst = float(np.min(var))
            raise NumericalVarianceError(
                f"posterior variance {worst} below round-off floor {floor}")
        return np.maximum(var, 0.0)

    # -- batched queries ---------------------------------------------------

    def mean_many(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.data.size == 0:
            return np.zeros(x.shape[0])
        return self._kt(x).T @ self._alpha

    def var_many(self, x: np.ndarray) -> np.ndarray:
        return self.mean_var_many(x)[1]

    def mean_var_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sf2 = self.kernel.signal_variance
        if self.data.size == 0:
            return np.zeros(x.shape[0]), np.full(x.shape[0], sf2)
        kt = self._kt(x)
        half = self._half_solve(kt)
        mean = kt.T @ self._alpha
        var = sf2 - np.sum(half * half, axis=0)
        return mean, self._clamp_var(var)

    def mean_var_grad_many(self, x: np.ndarray):
        """Means, variances and their input-gradients at query points.

        Returns ``(mean, var, dmean, dvar)`` with shapes (P,), (P,), (P, d),
        (P, d). Used by the acquisition optimizers.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p, d = x.shape
        sf2 = self.kernel.signal_variance
        if self.data.size == 0:
            return (np.zeros(p), np.full(p, sf2), np.zeros((p, d)), np.zeros((p, d)))
        kt = self._kt(x)                       # (n, P)
        w = self._full_solve(kt)               # (n, P)
        mean = kt.T @ self._alpha
        var = self._clamp_var(sf2 - np.sum(kt * w, axis=0))
        # dk(x_p, z_j)/dx_p, shape (P, n, d)
        jac = _kernels.matern_cross_grad(x, self.data.points,
                                         self.kernel.length_scale, sf2)
        dmean = np.einsum("pjd,j->pd", jac, self._alpha)
        dvar = -2.0 * np.einsum("pjd,jp->pd", jac, w)
        return mean, var, dmean, dvar

    # -- scalar contract operations ---------------------------------------

    def posterior_mean(self, x: np.ndarray) -> float:
        return float(self.mean_many(np.atleast_2d(x))[0])

    def posterior_var(self, x: np.ndarray) -> float:
        return float(self.mean_var_many(np.atleast_2d(x))[1][0])

    def posterior_cov(self, x: np.ndarray, x2: np.ndarray) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x2 = np.atleast_2d(np.asarray(x2, dtype=float))
        prior = kernel_eval(self.kernel, x, x2)
        if self.data.size == 0:
            return prior
        a = self._half_solve(self._kt(x))
        b = self._half_solve(self._kt(x2))
        val = prior - float(a[:, 0] @ b[:, 0])
        if np.allclose(x, x2):
            val = float(self._clamp_var(np.array([val]))[0])
        return val

    def cross_cov(self, x: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Posterior covariance row vector between x and each batch point."""
        pts = _batch_points(batch)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        prior = _kernels.matern_cross(x, pts, self.kernel.length_scale,
                                      self.kernel.signal_variance)[0]
        if self.data.size == 0:
            return prior
        a = self._half_solve(self._kt(x))      # (n, 1)
        b = self._half_solve(self._kt(pts))    # (n, m)
        return prior - (a.T @ b)[0]

    def grid_stats(self, box, resolution: int) -> "GridStats":
        """Posterior summaries on a fixed per-dimension grid, memoized.

        One fitted posterior serves several grid consumers per iteration
        (anchor search, inferred-maximum search, baseline candidate grids),
        and the training-factor solve against the grid dominates their cost,
        so it is computed once per (box, resolution).
        """
        key = (resolution, box.lower.tobytes(), box.upper.tobytes())
        hit = self._grid_cache.get(key)
        if hit is not None:
            return hit
        axes = [np.linspace(box.lower[j], box.upper[j], resolution)
                for j in range(box.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.ascontiguousarray(
            np.stack([m.ravel() for m in mesh], axis=1))
        sf2 = self.kernel.signal_variance
        if self.data.size == 0:
            stats = GridStats(grid, np.zeros(grid.shape[0]),
                              np.full(grid.shape[0], sf2), None)
        else:
            kt = self._kt(grid)
            half = self._half_solve(kt)
            mean = kt.T @ self._alpha
            var = self._clamp_var(sf2 - np.sum(half * half, axis=0))
            stats = GridStats(grid, mean, var, half)
        self._grid_cache[key] = stats
        return stats

    def batch_cov(self, batch: np.ndarray) -> np.ndarray:
        """Posterior covariance matrix of a batch; symmetric, diag clamped."""
        pts = _batch_points(batch)
        prior = _kernels.matern_cross(pts, pts, self.kernel.length_scale,
                                      self.kernel.signal_variance)
        if self.data.size == 0:
            cov = prior
        else:
            b = self._half_solve(self._kt(pts))
            cov = prior - b.T @ b
        cov = 0.5 * (cov + cov.T)
        diag = self._clamp_var(np.diag(cov).copy())
        np.fill_diagonal(cov, diag)
        return cov


@dataclass(frozen=True)
class GridStats:
    """Cached posterior summaries on a fixed grid; ``half`` is L^-1 k_t(grid)."""

    grid: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    half: Optional[np.ndarray]


def _batch_points(batch) -> np.ndarray:
    """Accept a QueryBatch-like object or a raw (m, d) array."""
    pts = getattr(batch, "points", batch)
    return np.ascontiguousarray(np.atleast_2d(np.asarray(pts, dtype=float)))


def fit_posterior(kernel: KernelSpec, data: Dataset) -> GpPosterior:
    """Factorize the regularized Gram matrix and precompute the value solve."""
    if data.size == 0:
        return GpPosterior(kernel, data, None, None)
    gram = _kernels.matern_cross(data.points, data.points,
                                 kernel.length_scale, kernel.signal_variance)
    gram[np.diag_indices_from(gram)] += kernel.effective_noise
    try:
        chol = cholesky(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"Gram matrix of {data.size} points is not numerically PD "
            f"(noise={kernel.noise_variance}, jitter={kernel.jitter}): {exc}") from exc
    alpha = cho_solve((chol, True), data.values, check_finite=False)
    return GpPosterior(kernel, data, chol, alpha)
