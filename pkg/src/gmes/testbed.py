"""Benchmark test functions, the noisy observation model, regret metrics,
and the full experiment loop that produces a regret trace.

All functions are posed as maximization problems (the standard forms are
negated). The experiment loop works in a normalized space: inputs rescaled
to the unit box and outputs mapped by a fixed per-function affine transform
(estimated once from a million uniform probes and frozen below), so a single
kernel configuration behaves comparably across functions. Regret is always
computed from the true function in original units.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .acquisition import GmesConfig, argmax_posterior_mean, gmes_select_batch
from .baselines import BaselineConfig, bucb_select, thompson_select, ucb_pe_select
from .errors import ExperimentError, OutOfDomainError
from .gp import Dataset, DomainBox, KernelSpec, fit_posterior


@dataclass(frozen=True)
class TestFunction:
    """A benchmark objective with known maximum and frozen output scaling."""

    name: str
    domain: DomainBox
    f_star: float
    x_star_set: np.ndarray
    fn: Callable[[np.ndarray], np.ndarray]
    value_offset: float
    value_scale: float

    def eval_many(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for row in x:
            if not self.domain.contains(row, tol=1e-12):
                raise OutOfDomainError(
                    f"point {row.tolist()} outside the {self.name} domain")
        return self.fn(x)

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.value_offset) / self.value_scale


def _ackley(x: np.ndarray) -> np.ndarray:
    q = np.sqrt(np.mean(x * x, axis=1))
    c = np.mean(np.cos(2.0 * np.pi * x), axis=1)
    return -(-20.0 * np.exp(-0.2 * q) - np.exp(c) + 20.0 + np.e)


def _bird(x: np.ndarray) -> np.ndarray:
    a, b = x[:, 0], x[:, 1]
    return -(np.sin(a) * np.exp((1.0 - np.cos(b)) ** 2)
             + np.cos(b) * np.exp((1.0 - np.sin(a)) ** 2) + (a - b) ** 2)


def _rosenbrock(x: np.ndarray) -> np.ndarray:
    a, b = x[:, 0], x[:, 1]
    return -(100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2)


# Bird optimum frozen from a 2000x2000 grid scan plus Nelder-Mead refinement;
# output offset/scale are the mean/std over 1e6 uniform probes of each domain.
BIRD_F_STAR = 106.76453674926478
BIRD_X_STARS = ((4.701043123341242, 3.152938506740262),
                (-1.5821421753258318, -3.130246805015685))

_FUNCTIONS = {
    "ackley": dict(bounds=(-5.0, 5.0), f_star=0.0, x_stars=((0.0, 0.0),),
                   fn=_ackley, offset=-9.6946, scale=2.5415),
    "bird": dict(bounds=(-2.0 * np.pi, 2.0 * np.pi), f_star=BIRD_F_STAR,
                 x_stars=BIRD_X_STARS, fn=_bird, offset=-26.280, scale=40.549),
    "rosenbrock": dict(bounds=(-2.0, 2.0), f_star=0.0, x_stars=((1.0, 1.0),),
                       fn=_rosenbrock, offset=-455.97, scale=606.66),
}


def function_names() -> list[str]:
    return sorted(_FUNCTIONS)


def make_test_function(name: str) -> TestFunction:
    try:
        info = _FUNCTIONS[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; "
                       f"valid: {function_names()}") from None
    lo, hi = info["bounds"]
    return TestFunction(
        name=name,
        domain=DomainBox(np.array([lo, lo]), np.array([hi, hi])),
        f_star=info["f_star"],
        x_star_set=np.array(info["x_stars"], dtype=float),
        fn=info["fn"],
        value_offset=info["offset"],
        value_scale=info["scale"],
    )


def eval_function(fn: TestFunction, x: np.ndarray) -> float:
    """Evaluate the true objective at a single in-domain point."""
    return float(fn.eval_many(np.atleast_2d(x))[0])


class ObservationModel:
    """Gaussian observation noise with an owned, seeded stream."""

    def __init__(self, sigma0: float, rng_seed: int):
        if sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        self.sigma0 = sigma0
        self.rng_seed = rng_seed
        self._rng = np.random.default_rng(rng_seed)

    def sample(self, fn: TestFunction, x: np.ndarray) -> np.ndarray:
        """Noisy observations of fn at the rows of x."""
        true = fn.eval_many(x)
        if self.sigma0 == 0:
            return true
        return true + self._rng.normal(0.0, self.sigma0, size=true.shape)


def observe(fn: TestFunction, x: np.ndarray, obs: ObservationModel) -> float:
    """One noisy scalar observation at x."""
    return float(obs.sample(fn, np.atleast_2d(x))[0])


@dataclass
class RegretAccumulator:
    """Running best true value and cumulative regret."""

    f_star: float
    best: float = -math.inf
    cumulative: float = 0.0


def compute_regret(acc: RegretAccumulator, fn: TestFunction,
                   new_batch: np.ndarray) -> tuple[float, float]:
    """Fold a freshly evaluated batch into the regret record.

    Instant regret uses the true function at queried points, never the noisy
    observations; it is therefore non-increasing by construction.
    """
    values = fn.eval_many(new_batch)
    acc.best = max(acc.best, float(values.max()))
    instant = acc.f_star - acc.best
    acc.cumulative += instant
    return instant, acc.cumulative


@dataclass
class RegretTrace:
    """Per-iteration record of one run; row 0 is the initial random batch."""

    iters: np.ndarray
    instant: np.ndarray
    cumulative: np.ndarray
    best_value: np.ndarray
    inferred: np.ndarray
    wall_ms: np.ndarray
    dataset_sizes: np.ndarray
    queries: np.ndarray  # (T+1, m, d) in original units


@dataclass
class ExperimentConfig:
    """One benchmark cell: algorithm x function x agent count, plus seeds."""

    algorithm: str = "gmes"
    function: str = "ackley"
    m: int = 5
    iterations: int = 150
    sigma0: float = 0.1
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(
        length_scale=0.1, signal_variance=1.0))
    gmes: GmesConfig = field(default_factory=GmesConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.m < 1:
            raise ValueError("agent count must be >= 1")


ALGORITHMS = ("gmes", "ucb_pe", "bucb", "thompson")


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None) -> RegretTrace:
    """Run one replicate of the observe / refit / select loop.

    The GP operates on unit-box inputs and affinely standardized outputs; the
    GP noise level is the configured sigma0 mapped through the same output
    scaling. Deterministic given the seed.
    """
    if cfg.algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {cfg.algorithm!r}; valid: {ALGORITHMS}")
    if seed is None:
        seed = cfg.seeds[0]
    fn = make_test_function(cfg.function)
    box = DomainBox.unit(fn.domain.dim)
    widths = fn.domain.widths

    def denorm(xn):
        return fn.domain.lower + xn * widths

    kernel = replace(cfg.kernel,
                     noise_variance=(cfg.sigma0 / fn.value_scale) ** 2)
    gmes_cfg = replace(cfg.gmes, rng_seed=seed)
    base_cfg = replace(cfg.baseline, rng_seed=seed)
    obs = ObservationModel(cfg.sigma0, rng_seed=np.random.SeedSequence(
        [seed, 1]).generate_state(1)[0])
    init_rng = np.random.default_rng([seed & 0xFFFFFFFF, 0])

    t_total = cfg.iterations
    m, d = cfg.m, fn.domain.dim
    instant = np.zeros(t_total + 1)
    cumulative = np.zeros(t_total + 1)
    best_value = np.zeros(t_total + 1)
    inferred = np.zeros((t_total + 1, d))
    wall_ms = np.zeros(t_total + 1)
    sizes = np.zeros(t_total + 1, dtype=int)
    queries = np.zeros((t_total + 1, m, d))

    acc = RegretAccumulator(f_star=fn.f_star)

    # initial batch: uniform random under the fixed seed
    t0 = time.perf_counter()
    xn = box.sample(init_rng, m)
    x_orig = denorm(xn)
    y = obs.sample(fn, x_orig)
    pts_n, vals_std = xn, fn.standardize(y)
    instant[0], cumulative[0] = compute_regret(acc, fn, x_orig)
    best_value[0] = acc.best
    inferred[0] = denorm(np.full(d, 0.5))  # prior mean is flat; report center
    sizes[0] = 0
    queries[0] = x_orig
    wall_ms[0] = 1e3 * (time.perf_counter() - t0)

    for t in range(1, t_total + 1):
        t0 = time.perf_counter()
        try:
            gp = fit_posterior(kernel, Dataset(pts_n, vals_std))
            inferred[t] = denorm(argmax_posterior_mean(gp, box, gmes_cfg))
            if cfg.algorithm == "gmes":
                batch, _ = gmes_select_batch(gp, t, box, m, gmes_cfg)
            elif cfg.algorithm == "ucb_pe":
                batch = ucb_pe_select(gp, t, box, m, base_cfg)
            elif cfg.algorithm == "bucb":
                batch = bucb_select(gp, t, box, m, base_cfg)
            else:
                batch = thompson_select(gp, t, box, m, base_cfg)
            x_orig = denorm(batch.points)
            y = obs.sample(fn, x_orig)
        except Exception as exc:  # attach the iteration index
            raise ExperimentError(t, exc) from exc
        instant[t], cumulative[t] = compute_regret(acc, fn, x_orig)
        best_value[t] = acc.best
        sizes[t] = pts_n.shape[0]
        queries[t] = x_orig
        pts_n = np.vstack([pts_n, batch.points])
        vals_std = np.concatenate([vals_std, fn.standardize(y)])
        wall_ms[t] = 1e3 * (time.perf_counter() - t0)

    return RegretTrace(iters=np.arange(t_total + 1), instant=instant,
                       cumulative=cumulative, best_value=best_value,
                       inferred=inferred, wall_ms=wall_ms,
                       dataset_sizes=sizes, queries=queries)
