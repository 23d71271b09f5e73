"""Test functions, observation model, regret bookkeeping, experiment loop."""

import numpy as np
import pytest
from scipy.optimize import minimize

from gmes import (ExperimentConfig, ObservationModel, eval_function,
                  make_test_function, observe, run_experiment)
from gmes.errors import OutOfDomainError
from gmes.testbed import (RegretAccumulator, compute_regret, function_names,
                          make_test_function as make_fn)


class TestFunctionDefinitions:
    def test_known_functions(self):
        assert function_names() == ["ackley", "bird", "rosenbrock"]
        with pytest.raises(KeyError):
            make_test_function("nope")

    def test_ackley_maximum_at_origin(self):
        fn = make_test_function("ackley")
        assert eval_function(fn, np.zeros(2)) == pytest.approx(0.0, abs=1e-12)
        assert fn.f_star == 0.0

    def test_rosenbrock_maximum(self):
        fn = make_test_function("rosenbrock")
        assert eval_function(fn, np.array([1.0, 1.0])) == pytest.approx(0.0)
        assert fn.f_star == 0.0

    def test_bird_frozen_constants(self):
        fn = make_test_function("bird")
        for x_star in fn.x_star_set:
            assert eval_function(fn, x_star) == pytest.approx(fn.f_star,
                                                              abs=1e-9)

    def test_bird_local_refinement_cannot_improve(self):
        # re-run the refinement oracle from the frozen maximizers
        fn = make_test_function("bird")
        for x_star in fn.x_star_set:
            res = minimize(lambda p: -fn.fn(p[None, :])[0], x_star,
                           method="Nelder-Mead",
                           options=dict(xatol=1e-12, fatol=1e-14))
            assert -res.fun <= fn.f_star + 1e-9

    @pytest.mark.parametrize("name", ["ackley", "bird", "rosenbrock"])
    def test_f_star_dominates_probes(self, name):
        fn = make_test_function(name)
        rng = np.random.default_rng(123)
        probes = rng.uniform(fn.domain.lower, fn.domain.upper, (100_000, 2))
        assert np.all(fn.eval_many(probes) <= fn.f_star)

    def test_out_of_domain_raises(self):
        fn = make_test_function("ackley")
        with pytest.raises(OutOfDomainError):
            eval_function(fn, np.array([6.0, 0.0]))


class TestObservationModel:
    def test_noiseless_is_exact(self):
        fn = make_test_function("ackley")
        obs = ObservationModel(0.0, rng_seed=0)
        x = np.array([1.0, -1.0])
        assert observe(fn, x, obs) == eval_function(fn, x)

    def test_clt_bound(self):
        fn = make_test_function("ackley")
        sigma0 = 0.25
        obs = ObservationModel(sigma0, rng_seed=1)
        x = np.array([0.5, 0.5])
        samples = np.array([observe(fn, x, obs) for _ in range(10_000)])
        assert abs(samples.mean() - eval_function(fn, x)) <= 4 * sigma0 / 100

    def test_reproducible_stream(self):
        fn = make_test_function("bird")
        x = np.array([1.0, 1.0])
        a_model = ObservationModel(0.3, rng_seed=7)
        b_model = ObservationModel(0.3, rng_seed=7)
        a = [observe(fn, x, a_model) for _ in range(5)]
        b = [observe(fn, x, b_model) for _ in range(5)]
        assert a == b
        assert len(set(a)) > 1  # stream advances, not a constant

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            ObservationModel(-0.1, rng_seed=0)


class TestComputeRegret:
    def test_first_iteration(self):
        fn = make_fn("ackley")
        acc = RegretAccumulator(f_star=fn.f_star)
        # find a point with value f_star - 1 along a ray via bisection
        lo, hi = 0.0, 5.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if fn.eval_many(np.array([[mid, 0.0]]))[0] > fn.f_star - 1.0:
                lo = mid
            else:
                hi = mid
        x = np.array([[lo, 0.0]])
        r, cum = compute_regret(acc, fn, x)
        assert r == pytest.approx(1.0, abs=1e-6)
        assert cum == pytest.approx(r)

    def test_worse_query_leaves_regret_unchanged(self):
        fn = make_fn("rosenbrock")
        acc = RegretAccumulator(f_star=fn.f_star)
        r1, _ = compute_regret(acc, fn, np.array([[1.0, 1.0]]))
        assert r1 == pytest.approx(0.0)
        r2, cum = compute_regret(acc, fn, np.array([[-1.0, -1.0]]))
        assert r2 == pytest.approx(0.0)
        assert cum == pytest.approx(r1 + r2)

    def test_exact_hit_floors_regret(self):
        fn = make_fn("bird")
        acc = RegretAccumulator(f_star=fn.f_star)
        compute_regret(acc, fn, fn.x_star_set[:1])
        r, _ = compute_regret(acc, fn, np.array([[0.0, 0.0]]))
        assert r == pytest.approx(0.0, abs=1e-9)

    def test_matches_hand_rolled_accumulation(self):
        fn = make_fn("ackley")
        rng = np.random.default_rng(3)
        acc = RegretAccumulator(f_star=fn.f_star)
        best, cum = -np.inf, 0.0
        for _ in range(3):
            batch = rng.uniform(-5, 5, (4, 2))
            r, c = compute_regret(acc, fn, batch)
            best = max(best, fn.eval_many(batch).max())
            cum += fn.f_star - best
            assert r == pytest.approx(fn.f_star - best)
            assert c == pytest.approx(cum)


def tiny_config(**kw):
    kwargs = dict(algorithm="gmes", function="ackley", m=2, iterations=4,
                  seeds=(0,))
    kwargs.update(kw)
    cfg = ExperimentConfig(**kwargs)
    cfg.gmes.restarts = 4
    cfg.gmes.ucb_maxiter = 30
    cfg.gmes.ucb_prescan = 16
    return cfg


class TestRunExperiment:
    def test_single_iteration_regret_definition(self):
        cfg = tiny_config(m=1, iterations=1, sigma0=0.0)
        trace = run_experiment(cfg, seed=0)
        fn = make_fn("ackley")
        # R_1 = f_star - best true value over the initial and first queries
        vals = [fn.eval_many(trace.queries[i])[0] for i in range(2)]
        assert trace.instant[1] == pytest.approx(fn.f_star - max(vals))

    def test_trace_invariants(self):
        for algorithm in ("gmes", "ucb_pe", "bucb", "thompson"):
            cfg = tiny_config(algorithm=algorithm, iterations=3)
            trace = run_experiment(cfg, seed=1)
            assert np.all(np.diff(trace.instant) <= 1e-12)
            assert np.all(np.diff(trace.cumulative) >= -1e-12)
            np.testing.assert_allclose(trace.cumulative,
                                       np.cumsum(trace.instant), rtol=1e-12)
            # |D_t| = m * t at the moment batch t is selected
            np.testing.assert_array_equal(trace.dataset_sizes,
                                          cfg.m * np.arange(4))
            assert trace.queries.shape == (4, 2, 2)

    def test_determinism_bitwise(self):
        cfg = tiny_config(algorithm="thompson", iterations=3)
        t1 = run_experiment(cfg, seed=5)
        t2 = run_experiment(cfg, seed=5)
        np.testing.assert_array_equal(t1.instant, t2.instant)
        np.testing.assert_array_equal(t1.cumulative, t2.cumulative)
        np.testing.assert_array_equal(t1.queries, t2.queries)
        np.testing.assert_array_equal(t1.inferred, t2.inferred)

    def test_unknown_algorithm_rejected(self):
        cfg = tiny_config()
        cfg.algorithm = "sa_ucb"
        with pytest.raises(ValueError, match="sa_ucb"):
            run_experiment(cfg, seed=0)

    def test_queries_stay_in_domain(self):
        cfg = tiny_config(algorithm="bucb", iterations=3)
        trace = run_experiment(cfg, seed=2)
        fn = make_fn("ackley")
        flat = trace.queries.reshape(-1, 2)
        assert np.all(flat >= fn.domain.lower - 1e-12)
        assert np.all(flat <= fn.domain.upper + 1e-12)
