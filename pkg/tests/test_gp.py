"""GP backend: kernel values, posterior queries, and the dense-solve oracle."""

import math

import numpy as np
import pytest

from gmes import Dataset, DomainBox, GpPosterior, KernelSpec, fit_posterior, kernel_eval
from gmes._kernels import matern_cross_np
from gmes.errors import FactorizationError, NumericalVarianceError

SQRT3 = math.sqrt(3.0)


def dense_posterior(spec, data, x, x2=None):
    """Direct dense-inverse evaluation of the posterior equations."""
    k = matern_cross_np(data.points, data.points, spec.length_scale,
                        spec.signal_variance)
    k[np.diag_indices_from(k)] += spec.noise_variance + spec.jitter
    inv = np.linalg.inv(k)
    kx = matern_cross_np(data.points, np.atleast_2d(x), spec.length_scale,
                         spec.signal_variance)[:, 0]
    mean = kx @ inv @ data.values
    if x2 is None:
        x2 = x
    kx2 = matern_cross_np(data.points, np.atleast_2d(x2), spec.length_scale,
                          spec.signal_variance)[:, 0]
    prior = matern_cross_np(np.atleast_2d(x), np.atleast_2d(x2),
                            spec.length_scale, spec.signal_variance)[0, 0]
    cov = prior - kx @ inv @ kx2
    return mean, cov


def random_instance(rng, n=None, d=None):
    n = n if n is not None else int(rng.integers(1, 13))
    d = d if d is not None else int(rng.integers(1, 4))
    spec = KernelSpec(length_scale=float(rng.uniform(0.2, 2.0)),
                      signal_variance=float(rng.uniform(0.3, 3.0)),
                      noise_variance=float(rng.uniform(0.001, 0.3)))
    pts = rng.uniform(-1.5, 1.5, (n, d))
    vals = rng.normal(size=n)
    return spec, Dataset(pts, vals)


class TestKernelEval:
    def test_zero_distance_is_signal_variance(self):
        spec = KernelSpec(length_scale=0.7, signal_variance=2.3)
        x = np.array([0.4, -1.0, 2.0])
        assert kernel_eval(spec, x, x) == pytest.approx(2.3, rel=1e-14)

    def test_far_field_decay(self):
        spec = KernelSpec(length_scale=0.5, signal_variance=1.7)
        x = np.zeros(2)
        far = np.array([30 * 0.5, 0.0])
        assert kernel_eval(spec, x, far) < 1e-6 * 1.7

    def test_frozen_scalar_value(self):
        # r = length_scale = 1: (1 + sqrt(3)) * exp(-sqrt(3))
        spec = KernelSpec(length_scale=1.0, signal_variance=1.0)
        val = kernel_eval(spec, np.zeros(1), np.ones(1))
        assert val == pytest.approx(0.4833577245965077, rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        spec = KernelSpec(length_scale=0.9, signal_variance=1.1)
        for _ in range(20):
            a, b = rng.normal(size=(2, 3))
            assert kernel_eval(spec, a, b) == pytest.approx(
                kernel_eval(spec, b, a), rel=1e-15)


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(length_scale=0.0), dict(length_scale=-1.0),
        dict(signal_variance=0.0), dict(noise_variance=-0.1),
        dict(jitter=0.0), dict(smoothness=2.5),
    ])
    def test_rejects_bad_kernel(self, kwargs):
        with pytest.raises(ValueError):
            KernelSpec(**kwargs)

    def test_default_jitter_scales_with_signal(self):
        assert KernelSpec(signal_variance=4.0).jitter == pytest.approx(4e-8)

    def test_dataset_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_box_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            DomainBox(np.array([0.0, 1.0]), np.array([1.0, 1.0]))


class TestPriorAndInterpolation:
    def test_empty_data_reduces_to_prior(self):
        spec = KernelSpec(length_scale=0.5, signal_variance=1.4)
        gp = fit_posterior(spec, Dataset.empty(2))
        x = np.array([0.3, 0.8])
        x2 = np.array([-0.2, 0.1])
        assert gp.posterior_mean(x) == 0.0
        assert gp.posterior_var(x) == 1.4
        assert gp.posterior_cov(x, x2) == pytest.approx(
            kernel_eval(spec, x, x2), rel=1e-15)

    def test_noiseless_datum_is_interpolated(self):
        spec = KernelSpec(length_scale=1.0, signal_variance=1.0,
                          noise_variance=0.0, jitter=1e-14)
        x0, v = np.array([0.2, -0.4]), 1.7
        gp = fit_posterior(spec, Dataset(x0[None, :], [v]))
        assert gp.posterior_mean(x0) == pytest.approx(v, rel=1e-9)
        assert gp.posterior_var(x0) == pytest.approx(0.0, abs=1e-9)
        assert gp.posterior_cov(x0, x0) == pytest.approx(0.0, abs=1e-9)


class TestDenseOracle:
    def test_mean_cov_match_dense_inverse(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            spec, data = random_instance(rng)
            gp = fit_posterior(spec, data)
            x = rng.uniform(-1.5, 1.5, data.dim)
            x2 = rng.uniform(-1.5, 1.5, data.dim)
            mean_o, cov_o = dense_posterior(spec, data, x, x2)
            var_o = dense_posterior(spec, data, x)[1]
            assert gp.posterior_mean(x) == pytest.approx(
                mean_o, rel=1e-10, abs=1e-12)
            assert gp.posterior_cov(x, x2) == pytest.approx(
                cov_o, rel=1e-10, abs=1e-12 * spec.signal_variance)
            assert gp.posterior_var(x) == pytest.approx(
                var_o, rel=1e-10, abs=1e-12 * spec.signal_variance)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        h = 1e-6
        for _ in range(20):
            spec, data = random_instance(rng, d=2)
            gp = fit_posterior(spec, data)
            x = rng.uniform(-1.0, 1.0, 2)
            _, _, dmean, dvar = gp.mean_var_grad_many(x[None, :])
            for j in range(2):
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                mp, vp = gp.mean_var_many(xp[None, :])
                mm, vm = gp.mean_var_many(xm[None, :])
                assert dmean[0, j] == pytest.approx(
                    (mp[0] - mm[0]) / (2 * h), rel=2e-5, abs=1e-7)
                assert dvar[0, j] == pytest.approx(
                    (vp[0] - vm[0]) / (2 * h), rel=2e-5, abs=1e-7)


class TestCovarianceBlocks:
    def test_cross_cov_single_point_matches_var(self):
        rng = np.random.default_rng(11)
        spec, data = random_instance(rng, n=5, d=2)
        gp = fit_posterior(spec, data)
        x = rng.uniform(-1, 1, 2)
        val = gp.cross_cov(x, x[None, :])
        assert val.shape == (1,)
        assert val[0] == pytest.approx(gp.posterior_cov(x, x), rel=1e-12)

    def test_cross_cov_prior_case(self):
        spec = KernelSpec(length_scale=0.8)
        gp = fit_posterior(spec, Dataset.empty(2))
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, 2)
        batch = rng.uniform(-1, 1, (4, 2))
        expected = [kernel_eval(spec, x, b) for b in batch]
        np.testing.assert_allclose(gp.cross_cov(x, batch), expected, rtol=1e-14)

    def test_cross_cov_entrywise(self):
        rng = np.random.default_rng(12)
        spec, data = random_instance(rng, n=8, d=3)
        gp = fit_posterior(spec, data)
        x = rng.uniform(-1, 1, 3)
        batch = rng.uniform(-1, 1, (5, 3))
        vec = gp.cross_cov(x, batch)
        for i in range(5):
            assert vec[i] == pytest.approx(
                gp.posterior_cov(x, batch[i]), abs=1e-12)

    def test_batch_cov_entrywise_and_duplicate(self):
        rng = np.random.default_rng(13)
        spec, data = random_instance(rng, n=6, d=2)
        gp = fit_posterior(spec, data)
        batch = rng.uniform(-1, 1, (4, 2))
        mat = gp.batch_cov(batch)
        np.testing.assert_allclose(mat, mat.T, atol=1e-14)
        for i in range(4):
            for j in range(4):
                assert mat[i, j] == pytest.approx(
                    gp.posterior_cov(batch[i], batch[j]), abs=1e-12)
        dup = gp.batch_cov(np.vstack([batch[0], batch[0]]))
        assert dup[0, 0] == pytest.approx(dup[0, 1], abs=1e-12)
        assert dup[0, 0] == pytest.approx(dup[1, 1], abs=1e-12)

    def test_batch_cov_psd(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            spec, data = random_instance(rng, d=int(rng.integers(1, 4)))
            gp = fit_posterior(spec, data)
            batch = rng.uniform(-1.5, 1.5, (int(rng.integers(1, 9)), data.dim))
            eigs = np.linalg.eigvalsh(gp.batch_cov(batch))
            assert eigs.min() >= -1e-9 * spec.signal_variance


class TestVarianceBehavior:
    def test_adding_datum_never_increases_variance(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            spec, data = random_instance(rng, d=2)
            gp = fit_posterior(spec, data)
            new_pt = rng.uniform(-1.5, 1.5, (1, 2))
            gp2 = fit_posterior(spec, data.appended(new_pt, [0.0]))
            probes = rng.uniform(-1.5, 1.5, (20, 2))
            v1 = gp.var_many(probes)
            v2 = gp2.var_many(probes)
            assert np.all(v2 <= v1 + 1e-9)

    def test_clamp_boundaries(self):
        gp = fit_posterior(KernelSpec(), Dataset.empty(1))
        assert gp._clamp_var(np.array([-0.5e-9]))[0] == 0.0
        with pytest.raises(NumericalVarianceError):
            gp._clamp_var(np.array([-2e-9]))

    def test_duplicate_points_without_noise_fail_factorization(self):
        spec = KernelSpec(noise_variance=0.0, jitter=1e-300)
        pts = np.array([[0.1, 0.2], [0.1, 0.2], [0.1, 0.2]])
        with pytest.raises(FactorizationError):
            fit_posterior(spec, Dataset(pts, np.zeros(3)))


def test_posterior_is_plain_value_object():
    spec, data = random_instance(np.random.default_rng(99), n=4, d=2)
    gp = fit_posterior(spec, data)
    assert isinstance(gp, GpPosterior)
    # repeated queries do not mutate state
    x = np.array([0.1, 0.1])
    first = gp.posterior_var(x)
    for _ in range(3):
        assert gp.posterior_var(x) == first
