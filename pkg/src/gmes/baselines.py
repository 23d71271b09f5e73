"""Reference batch-selection strategies used for benchmark comparisons.

All three pick their first (or only) point the same way the main algorithm
anchors itself, then differ in how the rest of the batch is filled:

* ``ucb_pe_select``: greedy variance maximization conditioned on the points
  already in the batch (pure exploration after the UCB point).
* ``bucb_select``: sequential UCB with hallucinated observations set to the
  posterior mean. Conditioning on the mean leaves the mean unchanged, so only
  the variance term needs updating, which the closed-form reduction provides.
* ``thompson_select``: joint posterior sample paths over a random candidate
  set, one argmax per agent.

Selection beyond the first point runs on a discretized candidate grid; the
resolution comes from :class:`BaselineConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .acquisition import GmesConfig, QueryBatch, find_x_ucb
from .errors import FactorizationError
from .gp import DomainBox, GpPosterior


@dataclass
class BaselineConfig:
    """Shared knobs for the baseline selectors."""

    beta_start: float = 3.0
    beta_decay: float = 0.01
    beta_schedule: Optional[Callable[[int], float]] = None
    candidate_grid_resolution: int = 40
    ts_candidates: int = 512
    rng_seed: int = 0

    def __post_init__(self):
        if self.candidate_grid_resolution < 16:
            raise ValueError("candidate_grid_resolution must be >= 16")
        if self.ts_candidates < 1:
            raise ValueError("ts_candidates must be >= 1")

    def beta(self, t: int) -> float:
        if self.beta_schedule is not None:
            return float(self.beta_schedule(t))
        return max(self.beta_start - self.beta_decay * t, 0.0)

    def anchor_cfg(self) -> GmesConfig:
        """Inner config for the continuous UCB maximization of point one."""
        return GmesConfig(beta_start=self.beta_start, beta_decay=self.beta_decay,
                          beta_schedule=self.beta_schedule, rng_seed=self.rng_seed)


def _candidate_grid(box: DomainBox, resolution: int) -> np.ndarray:
    axes = [np.linspace(box.lower[j], box.upper[j], resolution)
            for j in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


class _GridConditioner:
    """Sequential selection over a fixed grid, reusing cached grid solves.

    The expensive grid solve against the training factor is shared through
    ``GpPosterior.grid_stats``; each added batch point then costs only small
    cross terms. ``reduced_var`` equals base variance minus the closed-form
    reduction by the chosen set.
    """

    def __init__(self, gp: GpPosterior, box: DomainBox, resolution: int):
        self.gp = gp
        stats = gp.grid_stats(box, resolution)
        self.grid = stats.grid
        self.mean = stats.mean
        self.base_var = stats.var
        self._a_grid = stats.half

    def reduced_var(self, chosen: np.ndarray) -> np.ndarray:
        gp, kern = self.gp, self.gp.kernel
        cross = _kernels.matern_cross(self.grid, chosen, kern.length_scale,
                                      kern.signal_variance)
        if self._a_grid is not None:
            a_ch = gp._half_solve(gp._kt(chosen))
            cross = cross - self._a_grid.T @ a_ch
        c = gp.batch_cov(chosen)
        c[np.diag_indices_from(c)] += kern.effective_noise
        w = cho_solve(cho_factor(c, lower=True, check_finite=False),
                      cross.T, check_finite=False)
        reduction = np.sum(cross.T * w, axis=0)
        return np.maximum(self.base_var - reduction, 0.0)


def ucb_pe_select(gp: GpPosterior, t: int, box: DomainBox, m: int,
                  cfg: BaselineConfig) -> QueryBatch:
    """UCB first, then maximal conditioned standard deviation for the rest."""
    beta = cfg.beta(t)
    first = find_x_ucb(gp, beta, box, cfg.anchor_cfg())
    chosen = [first]
    if m > 1:
        cond = _GridConditioner(gp, _candidate_grid(
            box, cfg.candidate_grid_resolution))
        for _ in range(m - 1):
            cond_var = cond.reduced_var(np.array(chosen))
            chosen.append(cond.grid[int(np.argmax(cond_var))])
    return QueryBatch(np.array(chosen))


def bucb_select(gp: GpPosterior, t: int, box: DomainBox, m: int,
                cfg: BaselineConfig) -> QueryBatch:
    """Sequential UCB under posterior-mean hallucination.

    The hallucinated refit keeps the mean fixed and shrinks the variance by
    the closed-form reduction, so no actual refit is performed.
    """
    beta = cfg.beta(t)
    first = find_x_ucb(gp, beta, box, cfg.anchor_cfg())
    chosen = [first]
    if m > 1:
        cond = _GridConditioner(gp, _candidate_grid(
            box, cfg.candidate_grid_resolution))
        for _ in range(m - 1):
            score = cond.mean + beta * np.sqrt(cond.reduced_var(
                np.array(chosen)))
            chosen.append(cond.grid[int(np.argmax(score))])
    return QueryBatch(np.array(chosen))


def thompson_select(gp: GpPosterior, t: int, box: DomainBox, m: int,
                    cfg: BaselineConfig) -> QueryBatch:
    """One joint posterior sample path per agent over random candidates."""
    rng = np.random.default_rng([cfg.rng_seed & 0xFFFFFFFF, t & 0xFFFFFFFF])
    n_cand = max(cfg.ts_candidates, m)
    candidates = box.sample(rng, n_cand)
    mean = gp.mean_many(candidates)
    cov = gp.batch_cov(candidates)

    jitter = gp.kernel.jitter
    chol = None
    for _ in range(4):  # up to 3 jitter doublings
        try:
            reg = cov.copy()
            reg[np.diag_indices_from(reg)] += jitter
            chol = np.linalg.cholesky(reg)
            break
        except np.linalg.LinAlgError:
            jitter *= 2.0
    if chol is None:
        raise FactorizationError(
            "candidate covariance is not PD even after jitter escalation")

    draws = mean[:, None] + chol @ rng.standard_normal((n_cand, m))
    picks = np.argmax(draws, axis=0)
    return QueryBatch(candidates[picks])
