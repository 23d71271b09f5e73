"""Batch query selection by maximizing predicted variance reduction.

The selection target for iteration t is an anchor point with maximal upper
confidence bound. Conditioning the posterior on a candidate batch B shrinks
the variance at the anchor x by the closed-form quadratic

    reduction(B, x) = s(x)^T (C + noise I)^-1 s(x),

where s(x) is the posterior cross-covariance between x and the batch and C
the posterior covariance of the batch among itself. The quantity is
observation-value free, so selecting a batch needs no hallucinated data and
no refit. ``gmes_select_batch`` maximizes it (minus an optional pairwise
log-barrier) over the box domain with Adam steps, coordinatewise projection,
and a monotone step-halving fallback.

All randomness flows through explicit seeds; every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from . import _kernels
from .errors import (BarrierDomainError, BatchInitError, DegenerateVarianceError,
                     FactorizationError)
from .gp import DomainBox, GpPosterior

# Residual variance below this fraction of the signal variance is degenerate.
MI_FLOOR_REL = 1e-12
# Gradient steps may not bring a pair closer than r_div + this margin.
BARRIER_MARGIN = 1e-6


@dataclass(frozen=True)
class QueryBatch:
    """Ordered set of m query points, one row per agent."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", np.ascontiguousarray(pts))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def min_separation(self) -> float:
        return _kernels.min_pairwise_distance(self.points)


@dataclass
class GmesConfig:
    """Knobs for anchor search and batch gradient ascent.

    ``beta_schedule`` overrides the default linear confidence width
    max(beta_start - beta_decay * t, 0). ``base_step`` defaults to
    0.05 * box_diagonal / sqrt(d) at call time. The ``ucb_*`` and
    ``batch_restarts`` fields trade precision for runtime; benchmark configs
    lower them from the defaults here.
    """

    beta_start: float = 3.0
    beta_decay: float = 0.01
    beta_schedule: Optional[Callable[[int], float]] = None
    ascent_iters: int = 50
    base_step: Optional[float] = None
    decay1: float = 0.9
    decay2: float = 0.999
    adam_eps: float = 1e-8
    r_div: float = 0.0
    barrier_scale: float = 1.0
    restarts: int = 16
    ucb_prescan: int = 32
    ucb_maxiter: int = 100
    batch_restarts: int = 2
    monotone_retries: int = 5
    init_attempts: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if self.ascent_iters < 1:
            raise ValueError("ascent_iters must be >= 1")
        if self.barrier_scale <= 0:
            raise ValueError("barrier_scale must be > 0")
        if self.r_div < 0:
            raise ValueError("r_div must be >= 0")
        if self.restarts < 1 or self.batch_restarts < 1:
            raise ValueError("restart counts must be >= 1")

    def beta(self, t: int) -> float:
        if self.beta_schedule is not None:
            return float(self.beta_schedule(t))
        return max(self.beta_start - self.beta_decay * t, 0.0)


@dataclass
class AcquisitionReport:
    """Diagnostics from one batch selection."""

    x_ucb: np.ndarray
    gamma_value: float
    surrogate_mi: float
    ascent_trajectory: Optional[list[float]] = None


# --------------------------------------------------------------------------
# upper confidence bound and anchor search
# --------------------------------------------------------------------------


def ucb_value(gp: GpPosterior, x: np.ndarray, beta: float) -> float:
    """mean(x) + beta * std(x) with the clamped posterior variance."""
    mean, var = gp.mean_var_many(np.atleast_2d(x))
    return float(mean[0] + beta * math.sqrt(var[0]))


def _ucb_many(gp: GpPosterior, x: np.ndarray, beta: float) -> np.ndarray:
    mean, var = gp.mean_var_many(x)
    return mean + beta * np.sqrt(var)


def find_x_ucb(gp: GpPosterior, beta: float, box: DomainBox,
               cfg: GmesConfig) -> np.ndarray:
    """Maximize the UCB surface over the box.

    Candidates come from a cached grid pre-scan (d <= 2), the best observed
    points, and seeded uniform draws. The top ``cfg.restarts`` candidates run
    a vectorized projected Adam ascent (all restarts advance together in
    batched posterior queries), and the single best point gets one
    bound-constrained quasi-Newton polish. Every evaluated point competes for
    best-ever, so the result is never worse than any candidate. Deterministic
    given ``cfg.rng_seed``.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    d = box.dim
    cands = []
    if d <= 2:
        stats = gp.grid_stats(box, cfg.ucb_prescan)
        cands.append(stats.grid)
        grid_vals = stats.mean + beta * np.sqrt(stats.var)
    else:
        cands.append(box.sample(rng, 512))
        grid_vals = _ucb_many(gp, cands[0], beta)
    extra = []
    if gp.data.size > 0:
        top = np.argsort(gp.data.values)[::-1][:8]
        extra.append(gp.data.points[top])
    extra.append(box.sample(rng, 8))
    extra = np.vstack(extra)
    candidates = np.vstack(cands + [extra])
    values = np.concatenate([grid_vals, _ucb_many(gp, extra, beta)])

    best_idx = int(np.argmax(values))
    best_x = candidates[best_idx].copy()
    best_val = float(values[best_idx])
    if gp.data.size == 0:  # flat prior surface, nothing to climb
        return best_x

    sf2 = gp.kernel.signal_variance
    std_floor = 1e-9 * math.sqrt(sf2)

    def batch_value_grad(pts):
        mean, var, dmean, dvar = gp.mean_var_grad_many(pts)
        std = np.maximum(np.sqrt(var), std_floor)
        vals = mean + beta * std
        grads = dmean + beta * dvar / (2.0 * std)[:, None]
        return vals, grads

    # vectorized multi-start ascent with best-ever tracking
    order = np.argsort(values)[::-1][:cfg.restarts]
    pts = candidates[order].copy()
    delta = 0.05 * box.diagonal / math.sqrt(d)
    m1 = np.zeros_like(pts)
    v1 = np.zeros_like(pts)
    for n in range(1, cfg.ucb_maxiter + 1):
        vals, grads = batch_value_grad(pts)
        step_best = int(np.argmax(vals))
        if vals[step_best] > best_val:
            best_val = float(vals[step_best])
            best_x = pts[step_best].copy()
        m1 = cfg.decay1 * m1 + (1.0 - cfg.decay1) * grads
        v1 = cfg.decay2 * v1 + (1.0 - cfg.decay2) * grads * grads
        mhat = m1 / (1.0 - cfg.decay1 ** n)
        vhat = v1 / (1.0 - cfg.decay2 ** n)
        pts = np.clip(pts + delta * mhat / (np.sqrt(vhat) + cfg.adam_eps),
                      box.lower, box.upper)
    vals, _ = batch_value_grad(pts)
    step_best = int(np.argmax(vals))
    if vals[step_best] > best_val:
        best_val = float(vals[step_best])
        best_x = pts[step_best].copy()

    def neg_ucb_and_grad(x):
        mean, var, dmean, dvar = gp.mean_var_grad_many(x[None, :])
        std = max(math.sqrt(var[0]), std_floor)
        grad = dmean[0] + beta * dvar[0] / (2.0 * std)
        return -(mean[0] + beta * std), -grad

    res = minimize(neg_ucb_and_grad, best_x, jac=True, method="L-BFGS-B",
                   bounds=list(zip(box.lower, box.upper)),
                   options=dict(maxiter=60))
    if -float(res.fun) > best_val:
        best_x = box.clip(res.x)
    return best_x


def argmax_posterior_mean(gp: GpPosterior, box: DomainBox,
                          cfg: GmesConfig) -> np.ndarray:
    """Location of the maximal posterior mean (the inferred maximum)."""
    return find_x_ucb(gp, 0.0, box, cfg)


# --------------------------------------------------------------------------
# variance reduction and its gradient
# --------------------------------------------------------------------------


def _reduction_system(gp: GpPosterior, pts: np.ndarray, x: np.ndarray):
    """Cross-covariance vector s, batch covariance factor, and solve w."""
    s = gp.cross_cov(x, pts)
    c = gp.batch_cov(pts)
    c[np.diag_indices_from(c)] += gp.kernel.effective_noise
    try:
        factor = cho_factor(c, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            "batch covariance plus noise is not numerically PD; this usually "
            "means coincident batch points with zero observation noise") from exc
    w = cho_solve(factor, s, check_finite=False)
    return s, w


def gamma(gp: GpPosterior, batch, x: np.ndarray) -> float:
    """Predicted posterior-variance drop at x from conditioning on the batch.

    Always in [0, var(x)] up to round-off; independent of observed values.
    """
    pts = _as_points(batch)
    s, w = _reduction_system(gp, pts, x)
    return max(float(s @ w), 0.0)


def gamma_many(gp: GpPosterior, batch, probes: np.ndarray) -> np.ndarray:
    """Vectorized :func:`gamma` over rows of ``probes``."""
    pts = _as_points(batch)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    kern = gp.kernel
    cross_prior = _kernels.matern_cross(probes, pts, kern.length_scale,
                                        kern.signal_variance)
    if gp.data.size > 0:
        a = gp._half_solve(gp._kt(probes))
        b = gp._half_solve(gp._kt(pts))
        s_mat = cross_prior - a.T @ b
    else:
        s_mat = cross_prior
    c = gp.batch_cov(pts)
    c[np.diag_indices_from(c)] += kern.effective_noise
    try:
        factor = cho_factor(c, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            "batch covariance plus noise is not numerically PD") from exc
    w = cho_solve(factor, s_mat.T, check_finite=False)
    return np.maximum(np.sum(s_mat.T * w, axis=0), 0.0)


def gamma_gradient(gp: GpPosterior, batch, x: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`gamma` with respect to the batch points.

    Shape (m, d). Derived by the chain rule through the kernel distance
    terms; matches central finite differences (unit tests pin 1e-4 relative).
    """
    pts = _as_points(batch)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    cache = _probe_cache(gp, x)
    _, state = _gamma_state(gp, pts, x, cache)
    return _gamma_grad_from_state(gp, pts, x, cache, state)


def _probe_cache(gp: GpPosterior, x: np.ndarray):
    """Per-anchor solves reused across ascent steps (anchor is fixed)."""
    if gp.data.size == 0:
        return None
    ktx = gp._kt(x)                 # (n, 1)
    return {
        "ax": gp._half_solve(ktx)[:, 0],   # L^-1 k_t(x)
        "vx": gp._full_solve(ktx)[:, 0],   # M^-1 k_t(x)
    }


def _gamma_state(gp: GpPosterior, pts: np.ndarray, x: np.ndarray, cache):
    """Variance reduction value plus the solves the gradient can reuse.

    This is the cheap phase: trial points in the line search only ever need
    the value, so the gradient tensors are deferred to
    :func:`_gamma_grad_from_state`.
    """
    kern = gp.kernel
    prior_sx = _kernels.matern_cross(pts, x, kern.length_scale,
                                     kern.signal_variance)[:, 0]
    prior_cc = _kernels.matern_cross(pts, pts, kern.length_scale,
                                     kern.signal_variance)
    if cache is None:
        s = prior_sx
        c = prior_cc.copy()
        a_b = None
    else:
        a_b = gp._half_solve(gp._kt(pts))  # L^-1 k_t(B), (n, m)
        s = prior_sx - a_b.T @ cache["ax"]
        c = prior_cc - a_b.T @ a_b
    c = 0.5 * (c + c.T)
    c[np.diag_indices_from(c)] += kern.effective_noise
    try:
        factor = cho_factor(c, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            "batch covariance plus noise is not numerically PD") from exc
    w = cho_solve(factor, s, check_finite=False)
    value = max(float(s @ w), 0.0)
    return value, {"w": w, "a_b": a_b}


def _gamma_grad_from_state(gp: GpPosterior, pts: np.ndarray, x: np.ndarray,
                           cache, state) -> np.ndarray:
    """Gradient of the variance reduction, reusing the value-phase solves.

    Let s_i = cov(b_i, x), C = cov(B, B) + noise I, w = C^-1 s. Then
    value = s^T w and, collecting the chain rule through the kernel,

        d value / d b_i = 2 w_i (g_i - sum_k w_k G[i,k] + T_i (V w - v_x))

    with g_i = dk(b_i, x)/db_i, G[i,k] = dk(b_i, b_k)/db_i, T_i the stacked
    dk(b_i, z_j)/db_i over training points z, V = M^-1 k_t(B), v_x = M^-1
    k_t(x). The diagonal G[i,i] vanishes for a stationary kernel, which makes
    the formula uniform over i = k.
    """
    kern = gp.kernel
    w = state["w"]
    g_x = _kernels.matern_cross_grad(pts, x, kern.length_scale,
                                     kern.signal_variance)[:, 0, :]
    g_bb = _kernels.matern_cross_grad(pts, pts, kern.length_scale,
                                      kern.signal_variance)
    inner = g_x - np.einsum("ikd,k->id", g_bb, w)
    if cache is not None:
        v_b = gp._half_solve_t(state["a_b"])   # M^-1 k_t(B) from L^-1 k_t(B)
        t_b = _kernels.matern_cross_grad(pts, gp.data.points,
                                         kern.length_scale, kern.signal_variance)
        inner += np.einsum("ind,n->id", t_b, v_b @ w - cache["vx"])
    return 2.0 * w[:, None] * inner


# --------------------------------------------------------------------------
# separation barrier and box projection
# --------------------------------------------------------------------------


def log_barrier(batch, r_div: float, scale: float) -> float:
    """Pairwise separation penalty; zero once every pair is r_div + 1 apart.

    Raises :class:`BarrierDomainError` if any pairwise distance is at or
    below r_div, where the barrier is undefined.
    """
    pts = _as_points(batch)
    _check_barrier_domain(pts, r_div)
    value, _ = _kernels.separation_barrier(pts, r_div, scale)
    return float(value)


def log_barrier_gradient(batch, r_div: float, scale: float) -> np.ndarray:
    """Gradient of :func:`log_barrier` with respect to the batch, (m, d)."""
    pts = _as_points(batch)
    _check_barrier_domain(pts, r_div)
    _, grad = _kernels.separation_barrier(pts, r_div, scale)
    return grad


def _check_barrier_domain(pts: np.ndarray, r_div: float) -> None:
    dmin = _kernels.min_pairwise_distance(pts)
    if dmin <= r_div:
        raise BarrierDomainError(
            f"minimum pairwise distance {dmin} is <= separation radius {r_div}")


def project_box(batch, box: DomainBox) -> QueryBatch:
    """Euclidean projection onto the box: coordinatewise clamping."""
    pts = _as_points(batch)
    return QueryBatch(np.clip(pts, box.lower, box.upper))


# --------------------------------------------------------------------------
# batch selection
# --------------------------------------------------------------------------


def gmes_select_batch(gp: GpPosterior, t: int, box: DomainBox, m: int,
                      cfg: GmesConfig) -> tuple[QueryBatch, AcquisitionReport]:
    """Select the next batch of m query points for iteration t.

    Finds the UCB anchor, then runs ``cfg.batch_restarts`` projected Adam
    ascents of (reduction - barrier) from separated initializations: one
    seeded around the anchor, the rest by rejection sampling. A step is
    halved and retried when it would decrease the objective or push a pair
    within the barrier margin, so the per-step objective trace is
    non-decreasing. Best restart wins; ties go to the lower restart index.
    """
    if m < 1:
        raise ValueError("agent count m must be >= 1")
    beta = cfg.beta(t)
    x_ucb = find_x_ucb(gp, beta, box, cfg)
    anchor = x_ucb.reshape(1, -1)
    cache = _probe_cache(gp, anchor)
    rng = np.random.default_rng([cfg.rng_seed & 0xFFFFFFFF, t & 0xFFFFFFFF])

    delta = cfg.base_step
    if delta is None:
        delta = 0.05 * box.diagonal / math.sqrt(box.dim)

    use_barrier = cfg.r_div > 0 and m > 1

    def value_phase(pts):
        """(reduction value, penalized objective, reusable state)."""
        val, state = _gamma_state(gp, pts, anchor, cache)
        obj = val
        if use_barrier:
            pval, pgrad = _kernels.separation_barrier(pts, cfg.r_div,
                                                      cfg.barrier_scale)
            obj = val - pval
            state["pgrad"] = pgrad
        return val, obj, state

    def grad_phase(pts, state):
        grad = _gamma_grad_from_state(gp, pts, anchor, cache, state)
        if use_barrier:
            grad = grad - state["pgrad"]
        return grad

    best = None
    for restart in range(cfg.batch_restarts):
        if restart == 0:
            pts0 = _init_near_anchor(x_ucb, m, box, cfg, rng)
        else:
            pts0 = None
        if pts0 is None:
            pts0 = _init_rejection(box, m, cfg, rng)

        gval, obj, state = value_phase(pts0)
        grad = grad_phase(pts0, state)
        obj0 = obj
        traj = [obj]
        m1 = np.zeros_like(pts0)
        v1 = np.zeros_like(pts0)
        pts = pts0
        for n in range(1, cfg.ascent_iters + 1):
            m1 = cfg.decay1 * m1 + (1.0 - cfg.decay1) * grad
            v1 = cfg.decay2 * v1 + (1.0 - cfg.decay2) * grad * grad
            mhat = m1 / (1.0 - cfg.decay1 ** n)
            vhat = v1 / (1.0 - cfg.decay2 ** n)
            direction = mhat / (np.sqrt(vhat) + cfg.adam_eps)

            scale = 1.0
            for _ in range(cfg.monotone_retries + 1):
                trial = np.clip(pts + scale * delta * direction,
                                box.lower, box.upper)
                if use_barrier and _kernels.min_pairwise_distance(trial) \
                        <= cfg.r_div + BARRIER_MARGIN:
                    scale *= 0.5
                    continue
                gval_n, obj_n, state_n = value_phase(trial)
                if obj_n >= obj:
                    pts, gval, obj = trial, gval_n, obj_n
                    grad = grad_phase(trial, state_n)
                    break
                scale *= 0.5
            traj.append(obj)

        if best is None or obj > best[1]:
            best = (pts, obj, gval, obj0, traj)

    pts, obj, gval, obj0, traj = best
    batch = QueryBatch(pts)
    if use_barrier and batch.min_separation() <= cfg.r_div:
        raise BatchInitError("selected batch violates the separation radius")

    var_anchor = gp.posterior_var(x_ucb)
    resid = max(var_anchor - gval, MI_FLOOR_REL * gp.kernel.signal_variance)
    mi = max(0.0, 0.5 * math.log(var_anchor / resid)) if var_anchor > 0 else 0.0
    report = AcquisitionReport(x_ucb=x_ucb, gamma_value=gval,
                               surrogate_mi=mi, ascent_trajectory=traj)
    return batch, report


def _init_near_anchor(x_ucb: np.ndarray, m: int, box: DomainBox,
                      cfg: GmesConfig, rng: np.random.Generator):
    """Separated points around the anchor; None if clipping breaks separation."""
    if m == 1:
        return x_ucb.reshape(1, -1).copy()
    spread = max(cfg.r_div, 0.01 * box.diagonal)
    # chord of the placement circle must exceed r_div
    if cfg.r_div > 0:
        spread = max(spread, 0.53 * cfg.r_div / math.sin(math.pi / m))
    d = box.dim
    if d == 2:
        angles = 2.0 * math.pi * (np.arange(m) + rng.uniform()) / m
        offsets = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        raw = rng.normal(size=(m, d))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        offsets = spread * raw
    # pull the circle center inside the box so clipping cannot merge points
    margin = np.minimum(spread, 0.5 * box.widths)
    center = np.clip(x_ucb, box.lower + margin, box.upper - margin)
    pts = np.clip(center[None, :] + offsets, box.lower, box.upper)
    if cfg.r_div > 0 and _kernels.min_pairwise_distance(pts) \
            <= cfg.r_div + BARRIER_MARGIN:
        return None
    return pts


def _init_rejection(box: DomainBox, m: int, cfg: GmesConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Uniform draws accepted one by one at pairwise distance > r_div."""
    accepted: list[np.ndarray] = []
    needed_gap = cfg.r_div + BARRIER_MARGIN if cfg.r_div > 0 else 0.0
    for _ in range(cfg.init_attempts):
        cand = box.sample(rng, 1)[0]
        if all(np.linalg.norm(cand - p) > needed_gap for p in accepted):
            accepted.append(cand)
            if len(accepted) == m:
                return np.array(accepted)
    raise BatchInitError(
        f"could not place {m} points separated by {cfg.r_div} in "
        f"{cfg.init_attempts} attempts; box too small for this agent count")


# --------------------------------------------------------------------------
# surrogate mutual information
# --------------------------------------------------------------------------


def surrogate_mi(gp: GpPosterior, batch, x_ucb: np.ndarray) -> float:
    """Entropy drop (nats) of the normal max-value surrogate at the anchor.

    Equals 0.5 * log(var / (var - reduction)). Raises
    :class:`DegenerateVarianceError` when the residual variance falls below
    the numerical floor instead of returning infinity.
    """
    var = gp.posterior_var(x_ucb)
    if var <= 0:
        raise DegenerateVarianceError(
            "anchor variance is zero; surrogate information is undefined")
    g = gamma(gp, batch, x_ucb)
    resid = var - g
    if resid <= MI_FLOOR_REL * gp.kernel.signal_variance:
        raise DegenerateVarianceError(
            f"residual variance {resid} at the anchor is below the floor")
    return max(0.0, 0.5 * math.log(var / resid))


def _as_points(batch) -> np.ndarray:
    pts = getattr(batch, "points", batch)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.ascontiguousarray(pts)
