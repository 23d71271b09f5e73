"""Hot numeric kernels: Matérn-3/2 covariance blocks, their gradients, and
pairwise-separation primitives.

Two interchangeable backends live here:

* a Numba ``@njit`` path (default when numba imports cleanly), and
* a vectorized pure-NumPy path.

Set the environment variable ``GMES_NUMBA=0`` before import to force the
NumPy path (useful for debugging and for the backend benchmark under
``benchmarks/``). Both paths compute identical quantities; unit tests compare
them directly.

All arrays are float64 and C-contiguous; callers are expected to pass
``(n, d)`` point sets.
"""

from __future__ import annotations

import math
import os

import numpy as np

SQRT3 = math.sqrt(3.0)


def _env_wants_numba() -> bool:
    flag = os.environ.get("GMES_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


# --------------------------------------------------------------------------
# pure-NumPy backend
# --------------------------------------------------------------------------


def matern_cross_np(a: np.ndarray, b: np.ndarray, length_scale: float,
                    signal_variance: float) -> np.ndarray:
    """Matérn-3/2 covariance matrix k(a_i, b_j), shape (na, nb)."""
    diff = a[:, None, :] - b[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    s = SQRT3 * r / length_scale
    return signal_variance * (1.0 + s) * np.exp(-s)


def matern_cross_grad_np(a: np.ndarray, b: np.ndarray, length_scale: float,
                         signal_variance: float) -> np.ndarray:
    """Gradient of k(a_i, b_j) with respect to a_i, shape (na, nb, d).

    The Matérn-3/2 radial derivative cancels the 1/r factor of the distance
    gradient, so the expression is smooth at r = 0.
    """
    diff = a[:, None, :] - b[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    coef = -3.0 * signal_variance / (length_scale * length_scale) \
        * np.exp(-SQRT3 * r / length_scale)
    return coef[:, :, None] * diff


def min_pairwise_distance_np(x: np.ndarray) -> float:
    """Minimum pairwise Euclidean distance; +inf for fewer than 2 points."""
    m = x.shape[0]
    if m < 2:
        return math.inf
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    d[np.diag_indices(m)] = math.inf
    return float(d.min())


def separation_barrier_np(x: np.ndarray, r_div: float,
                          scale: float) -> tuple[float, np.ndarray]:
    """Pairwise log-barrier value and gradient.

    Each pair (i, j) contributes max(0, -log(d_ij - r_div) / scale); the
    positive part clips pairs separated by at least r_div + 1. Caller must
    ensure all d_ij > r_div.
    """
    m = x.shape[0]
    grad = np.zeros_like(x)
    if m < 2:
        return 0.0, grad
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(m, k=1)
    gap = d[iu] - r_div
    active = gap < 1.0
    value = float(np.sum(-np.log(gap[active]) / scale))
    if np.any(active):
        ii, jj = iu[0][active], iu[1][active]
        # d term grad wrt x_i: -(x_i - x_j) / (scale * gap * d)
        coef = -1.0 / (scale * gap[active] * d[ii, jj])
        contrib = coef[:, None] * (x[ii] - x[jj])
        np.add.at(grad, ii, contrib)
        np.add.at(grad, jj, -contrib)
    return value, grad


# --------------------------------------------------------------------------
# Numba backend (compiled lazily at import when enabled)
# --------------------------------------------------------------------------


def _build_numba_backend():
    from numba import njit

    @njit(cache=True)
    def matern_cross_nb(a, b, length_scale, signal_variance):
        na, d = a.shape
        nb = b.shape[0]
        out = np.empty((na, nb))
        inv = SQRT3 / length_scale
        for i in range(na):
            for j in range(nb):
                acc = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    acc += t * t
                s = inv * math.sqrt(acc)
                out[i, j] = signal_variance * (1.0 + s) * math.exp(-s)
        return out

    @njit(cache=True)
    def matern_cross_grad_nb(a, b, length_scale, signal_variance):
        na, d = a.shape
        nb = b.shape[0]
        out = np.empty((na, nb, d))
        inv = SQRT3 / length_scale
        c0 = -3.0 * signal_variance / (length_scale * length_scale)
        for i in range(na):
            for j in range(nb):
                acc = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    acc += t * t
                coef = c0 * math.exp(-inv * math.sqrt(acc))
                for k in range(d):
                    out[i, j, k] = coef * (a[i, k] - b[j, k])
        return out

    @njit(cache=True)
    def min_pairwise_distance_nb(x):
        m, d = x.shape
        best = math.inf  # squared distance
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    acc += t * t
                if acc < best:
                    best = acc
        return math.sqrt(best)

    @njit(cache=True)
    def separation_barrier_nb(x, r_div, scale):
        m, d = x.shape
        grad = np.zeros((m, d))
        value = 0.0
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for k in range(d):
                    t = x[i, k] - x[j, k]
                    acc += t * t
                dist = math.sqrt(acc)
                gap = dist - r_div
                if gap < 1.0:
                    value += -math.log(gap) / scale
                    coef = -1.0 / (scale * gap * dist)
                    for k in range(d):
                        g = coef * (x[i, k] - x[j, k])
                        grad[i, k] += g
                        grad[j, k] -= g
        return value, grad

    return (matern_cross_nb, matern_cross_grad_nb, min_pairwise_distance_nb,
            separation_barrier_nb)


NUMBA_ENABLED = False
if _env_wants_numba():
    try:
        (matern_cross, matern_cross_grad, min_pairwise_distance,
         separation_barrier) = _build_numba_backend()
        NUMBA_ENABLED = True
    except ImportError:
        pass

if not NUMBA_ENABLED:
    matern_cross = matern_cross_np
    matern_cross_grad = matern_cross_grad_np
    min_pairwise_distance = min_pairwise_distance_np
    separation_barrier = separation_barrier_np


def backend_name() -> str:
    """Active backend: 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"
