import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casecohort import update
from casecohort.dataset import CohortDataset
from casecohort.estimator import default_sieve
from casecohort.update import (
    BootstrapConfig,
    BootstrapError,
    CovarianceBlocks,
    bootstrap_replicate,
    draw_bootstrap_weights,
    estimate_sigma,
    fit_update,
    point_fits,
    rng_stream,
    run_bootstrap,
    update_estimate,
)

from conftest import make_cohort


def blocks(s11, s12, s22, n=1):
    a = lambda v: np.atleast_2d(np.asarray(v, dtype=float))  # noqa: E731
    return CovarianceBlocks(a(s11), a(s12), a(s22), n_replicates_used=10, n=n)


@pytest.fixture(scope="module")
def small():
    data = make_cohort(n=250, seed=11)
    return data, point_fits(data)


class TestMultipliers:
    def test_moments(self):
        u = draw_bootstrap_weights(1_000_000, rng_stream(1, 2))
        assert 0.995 <= u.mean() <= 1.005
        assert 0.99 <= u.var() <= 1.01
        assert np.all(u > 0)

    def test_streams_reproducible_and_distinct(self):
        a = draw_bootstrap_weights(5, rng_stream(3, 0, 1))
        np.testing.assert_array_equal(a, draw_bootstrap_weights(5, rng_stream(3, 0, 1)))
        assert not np.array_equal(a, draw_bootstrap_weights(5, rng_stream(3, 0, 2)))

    def test_config(self):
        with pytest.raises(ValueError):
            BootstrapConfig(B=1)
        with pytest.raises(ValueError):
            BootstrapConfig(weight_distribution="poisson")


class TestEstimateSigma:
    def test_identical_replicates_give_zero(self):
        rep = (np.array([0.3]), np.array([0.1]), np.array([0.05]))
        s = estimate_sigma([rep] * 5, 100)
        assert np.all(s.full == 0)

    def test_two_point(self):
        c, n = 0.2, 50
        s = estimate_sigma([(np.array([0.0]), np.array([0.0]), np.array([0.0])),
                            (np.array([c]), np.array([0.0]), np.array([0.0]))], n)
        assert s.sigma11[0, 0] == pytest.approx(n * c**2 / 2, rel=1e-12)
        assert s.sigma22[0, 0] == 0

    def test_matches_known_covariance(self):
        cov = np.array([[2.0, 0.8, -0.3], [0.8, 1.0, 0.1], [-0.3, 0.1, 0.5]])
        draws = rng_stream(5).multivariate_normal(np.zeros(3), cov, size=2000)
        reps = [(d[:1], d[1:] + 1.0, np.ones(2)) for d in draws]
        s = estimate_sigma(reps, 1)
        np.testing.assert_allclose(s.full, cov, atol=0.1 * np.abs(cov).max())

    def test_failures_dropped_and_counted(self):
        rep = (np.array([1.0]), np.array([0.0]), np.array([0.0]))
        s = estimate_sigma([rep, None, (np.array([2.0]), np.array([0.0]), np.array([0.0]))], 4)
        assert (s.n_replicates_used, s.n_failed) == (2, 1)

    def test_too_few(self):
        with pytest.raises(BootstrapError):
            estimate_sigma([None, None, (np.zeros(1), np.zeros(1), np.zeros(1))], 10)


class TestUpdateEstimate:
    def test_scalar_example(self):
        res = update_estimate((1.0, 0.7, 0.5), blocks(1.0, 0.5, 1.0))
        assert res.vartheta_bar[0] == pytest.approx(0.9, abs=1e-12)
        assert res.psi_hat[0, 0] == pytest.approx(0.75, abs=1e-12)
        assert not res.fallback

    def test_uncorrelated_leaves_estimate(self):
        res = update_estimate((1.0, 0.7, 0.5), blocks(1.0, 0.0, 1.0))
        assert res.vartheta_bar[0] == 1.0 and res.psi_hat[0, 0] == 1.0

    def test_zero_contrast_variance_falls_back(self):
        res = update_estimate((1.0, 0.5, 0.5), blocks(2.0, 0.0, 0.0, n=4))
        assert res.fallback
        assert res.vartheta_bar[0] == 1.0
        assert res.se_updated[0] == res.se_original[0] == pytest.approx(np.sqrt(0.5))

    def test_rank_deficient_contrast(self):
        s22 = np.array([[1.0, 1.0], [1.0, 1.0]])
        res = update_estimate(([1.0], [0.2, 0.2], [0.0, 0.0]), blocks(1.0, [[0.5, 0.5]], s22))
        # only the spanned direction is used: s12 s22^+ = (0.25, 0.25)
        assert res.vartheta_bar[0] == pytest.approx(1.0 - 0.25 * 0.4, abs=1e-12)
        assert res.psi_hat[0, 0] == pytest.approx(0.75, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            update_estimate(([1.0], [0.1, 0.2], [0.0, 0.0]), blocks(1.0, 0.5, 1.0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
    def test_updated_variance_never_larger(self, seed, d, k):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(d + k, d + k + 2))
        cov = a @ a.T
        s = CovarianceBlocks(cov[:d, :d], cov[:d, d:], cov[d:, d:], 10, 1)
        res = update_estimate((np.zeros(d), np.zeros(k), np.zeros(k)), s)
        diff = s.sigma11 - res.psi_hat
        assert np.linalg.eigvalsh(diff).min() >= -1e-9 * np.abs(cov).max()
        assert np.all(res.gain >= 1 - 1e-9)


class TestBootstrap:
    def test_unit_multipliers_replay_point_fits(self, small):
        data, fits = small
        v, wi, wf = bootstrap_replicate(data, np.ones(data.n), fits)
        np.testing.assert_allclose(v, fits.main.vartheta_hat, atol=1e-6)
        np.testing.assert_allclose(wi, fits.working_ipw.vartheta_hat, atol=1e-6)
        np.testing.assert_allclose(wf, fits.working_full.vartheta_hat, atol=1e-6)

    def test_rejects_bad_multipliers(self, small):
        data, fits = small
        with pytest.raises(ValueError):
            bootstrap_replicate(data, np.zeros(data.n), fits)
        with pytest.raises(ValueError):
            bootstrap_replicate(data, np.ones(data.n - 1), fits)

    def test_full_design_working_refits_coincide(self):
        data = make_cohort(n=250, seed=12, q_s=1.0)
        fits = point_fits(data)
        u = draw_bootstrap_weights(data.n, rng_stream(0, 1))
        _, wi, wf = bootstrap_replicate(data, u, fits)
        np.testing.assert_allclose(wi, wf, atol=1e-8)

    def test_full_design_update_falls_back(self):
        data = make_cohort(n=250, seed=12, q_s=1.0)
        _, upd = fit_update(data, bootcfg=BootstrapConfig(B=10, seed=1))
        assert upd.fallback
        np.testing.assert_array_equal(upd.vartheta_bar, upd.vartheta_hat)

    def test_failed_replicate_is_dropped(self, small, monkeypatch):
        data, fits = small
        real = update.bootstrap_replicate
        calls = []

        def flaky(*args, **kw):
            calls.append(1)
            if len(calls) == 3:
                raise update.ReplicateFailure("injected")
            return real(*args, **kw)

        monkeypatch.setattr(update, "bootstrap_replicate", flaky)
        s = run_bootstrap(data, fits, BootstrapConfig(B=8, seed=2), threads=1)
        assert (s.n_replicates_used, s.n_failed) == (7, 1)

    def test_shared_multipliers_carry_the_correlation(self, small):
        """Independent multipliers per refit destroy the cross-covariance the update relies on."""
        data, fits = small
        B = 200
        shared, split = [], []
        for b in range(B):
            u = draw_bootstrap_weights(data.n, rng_stream(9, b))
            shared.append(bootstrap_replicate(data, u, fits))
            perm = rng_stream(9, b, 1)
            u3 = np.stack([u, perm.permutation(u), perm.permutation(u)])
            split.append(bootstrap_replicate(data, u3, fits))
        def corr(reps):
            s = estimate_sigma(reps, data.n)
            return s.sigma12[0, 0] / np.sqrt(s.sigma11[0, 0] * s.sigma22[0, 0])

        r_shared, r_split = corr(shared), corr(split)
        assert r_shared > 0.3
        assert abs(r_split) < 0.2 < r_shared - 0.1

    def test_threads_do_not_change_results(self, small):
        data, fits = small
        cfg = BootstrapConfig(B=6, seed=4)
        a = run_bootstrap(data, fits, cfg, threads=1)
        b = run_bootstrap(data, fits, cfg, threads=2)
        np.testing.assert_array_equal(a.full, b.full)

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("CASECOHORT_THREADS", "3")
        assert update.default_threads() == 3
        monkeypatch.setenv("CASECOHORT_THREADS", "x")
        assert update.default_threads() == 1


def test_column_scaling_equivariance(small):
    """Rescaling X by c rescales the coefficient and its standard error by 1/c."""
    data, _ = small
    c = 2.5
    scaled = dataclasses.replace(data, x=data.x * c, xstar=data.xstar * c, _subjects=None)
    cfg = BootstrapConfig(B=20, seed=6)
    sieve = default_sieve(data)
    _, a = fit_update(data, sieve, cfg)
    _, b = fit_update(scaled, sieve, cfg)
    np.testing.assert_allclose(b.vartheta_bar * c, a.vartheta_bar, atol=1e-6)
    np.testing.assert_allclose(b.se_updated * c, a.se_updated, rtol=1e-4)
    assert isinstance(scaled, CohortDataset)
