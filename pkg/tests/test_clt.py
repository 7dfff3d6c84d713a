"""Birkhoff statistics: covariance series, decorrelation, rate machinery."""

import math

import numpy as np
import pytest

from limitlab import presets
from limitlab.clt import (CovMatrix, asymptotic_covariance, birkhoff_sum,
                          center_observable, char_discrepancy,
                          clt_rate_experiment, coboundary_degenerate_experiment,
                          coboundary_observable, covariance_congruence_check,
                          decorrelation_profile, lebesgue_mean,
                          yurinskii_integral)
from limitlab.dynamics import Observable
from limitlab.metrics import FiniteMeasure, GaussianSpec, gaussian_sample


def cat():
    return presets.cat_map()


class TestBirkhoffSum:
    def test_zero_steps(self):
        s = birkhoff_sum(cat(), presets.default_observable(), 0, [0.3, 0.4])
        assert np.array_equal(s, np.zeros(2))

    def test_one_step(self):
        f = presets.default_observable()
        x = np.array([0.3, 0.4])
        assert np.allclose(birkhoff_sum(cat(), f, 1, x), f(x))

    def test_cocycle_exact_in_rational_arithmetic(self):
        # exact-arithmetic mode: rational orbit, rational-valued observable
        from fractions import Fraction

        mat = presets.CAT_MATRIX

        def step(x):
            return [sum(Fraction(int(mat[i][j])) * x[j] for j in range(2)) % 1
                    for i in range(2)]

        def tent(u):
            return min(u, 1 - u)

        def sum_n(x, n):
            total = Fraction(0)
            for _ in range(n):
                total += tent(x[0]) * tent(x[1])
                x = step(x)
            return total, x

        x0 = [Fraction(3, 7), Fraction(1, 5)]
        for n, m in ((0, 5), (3, 4), (7, 0), (5, 9)):
            left, _ = sum_n(list(x0), n + m)
            s_n, shifted = sum_n(list(x0), n)
            s_m, _ = sum_n(shifted, m)
            assert left == s_n + s_m

    def test_cocycle_float_tight(self):
        f = presets.default_observable()
        A = cat()
        gen = np.random.default_rng(1)
        for _ in range(8):
            x = gen.random(2)
            n, m = map(int, gen.integers(0, 20, 2))
            left = birkhoff_sum(A, f, n + m, x)
            shifted = x
            for _ in range(n):
                shifted = A.step(shifted)
            right = birkhoff_sum(A, f, n, x) + birkhoff_sum(A, f, m, shifted)
            assert np.allclose(left, right, atol=1e-13)


class TestCentering:
    def test_already_centered(self):
        f = presets.default_observable()
        assert np.abs(lebesgue_mean(f, 2)).max() < 1e-12

    def test_constant_becomes_zero(self):
        c = Observable(dim_out=1, eta=1.0,
                       fn=lambda x: 3.7 * np.ones(x.shape[:-1] + (1,)))
        g = center_observable(c, 2)
        assert np.abs(g(np.random.default_rng(0).random((20, 2)))).max() < 1e-12

    def test_coordinate_mean_is_half(self):
        f = Observable(dim_out=1, eta=1.0, fn=lambda x: x[..., :1])
        g = center_observable(f, 2)
        assert g.subtracted_mean[0] == pytest.approx(0.5, abs=1e-12)

    def test_quadrature_floor(self):
        with pytest.raises(ValueError):
            center_observable(presets.default_observable(), 2, quadrature_points=1)


class TestAsymptoticCovariance:
    def test_zero_observable(self):
        est = asymptotic_covariance(cat(), presets.zero_observable(), 10, 1000, 0)
        assert np.abs(est.cov.entries).max() == 0.0

    def test_default_observable_matches_analytic(self):
        # characters of the cat map are lag-orthogonal: D = I/2 exactly
        est = asymptotic_covariance(cat(), presets.default_observable(), 20,
                                    200_000, 1)
        # noise from 2K+1 accumulated lag estimates at this sample size
        assert np.abs(est.cov.entries - 0.5 * np.eye(2)).max() < 0.03
        assert not est.truncation_warning

    def test_coboundary_is_degenerate(self):
        g = coboundary_observable(cat(), presets.sin_x1_observable())
        est = asymptotic_covariance(cat(), g, 40, 200_000, 2,
                                    check_centered=False)
        assert np.abs(est.cov.entries).max() <= 0.02

    def test_matches_long_run_covariance(self):
        # brute-force oracle: empirical Cov(S_n / sqrt(n)) at large n
        A, f = cat(), presets.default_observable()
        est = asymptotic_covariance(A, f, 20, 100_000, 3)
        gen = np.random.default_rng(4)
        m, n = 20_000, 4096
        x = gen.random((m, 2))
        acc = np.zeros((m, 2))
        for _ in range(n):
            acc += f(x)
            x = A.step(x)
        s = acc / math.sqrt(n)
        emp = s.T @ s / m
        assert np.abs(emp - est.cov.entries).max() < 0.05

    def test_rejects_uncentered(self):
        f = Observable(dim_out=1, eta=1.0, fn=lambda x: x[..., :1])
        with pytest.raises(ValueError):
            asymptotic_covariance(cat(), f, 5, 1000, 0)

    def test_congruence_identity(self):
        f = presets.default_observable()
        disc, bound = covariance_congruence_check(cat(), f, np.eye(2),
                                                  mc_samples=5000)
        assert disc == 0.0
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        disc, bound = covariance_congruence_check(cat(), f, rot,
                                                  mc_samples=5000)
        assert disc <= bound
        flip = np.diag([1.0, -1.0])
        disc, bound = covariance_congruence_check(cat(), f, flip,
                                                  mc_samples=5000)
        assert disc <= bound

    def test_congruence_rejects_nonorthogonal(self):
        with pytest.raises(ValueError):
            covariance_congruence_check(cat(), presets.default_observable(),
                                        np.array([[2.0, 0.0], [0.0, 1.0]]))


class TestDecorrelation:
    def test_constant_gives_no_fit(self):
        c = Observable(dim_out=1, eta=1.0,
                       fn=lambda x: np.ones(x.shape[:-1] + (1,)))
        prof = decorrelation_profile(cat(), c, c, 8, 20_000, 0)
        assert prof.status == "no-fit"

    def test_orbit_mix_fits_geometric_decay(self):
        # lag covariances are analytically 0.5 sum_k a_k a_{k+n}
        f = presets.orbit_mix_observable()
        prof = decorrelation_profile(cat(), f, f, 8, 400_000, 1)
        assert prof.status == "ok"
        assert 0.0 < prof.fitted_delta < 1.0
        assert prof.r2 >= 0.9
        a = [0.45 ** k for k in range(5)]
        want = [0.5 * sum(a[k] * a[k + n] for k in range(5 - n))
                for n in range(5)]
        got = prof.cov_norms[:5]
        assert np.allclose(got, want, atol=5e-3)
        assert prof.fitted_delta == pytest.approx(0.45, abs=0.05)

    def test_tent_product_decays_fast(self):
        # parity obstruction: only a few lags survive, then exact zero
        f = presets.tent_product_observable()
        prof = decorrelation_profile(cat(), f, f, 8, 500_000, 1)
        assert prof.cov_norms[1] < prof.cov_norms[0]
        noise = 4.0 / math.sqrt(500_000) * 0.2
        assert max(prof.cov_norms[3:]) <= noise

    def test_pure_character_has_zero_lag_covariance(self):
        # frequency orbits of the linear map never return: all lags >= 1
        # vanish, so the estimates sit at the Monte Carlo noise floor
        f = Observable(dim_out=1, eta=1.0,
                       fn=lambda x: np.cos(2 * np.pi * x[..., :1]))
        prof = decorrelation_profile(cat(), f, f, 8, 200_000, 2)
        noise = 4.0 / math.sqrt(200_000)
        assert max(prof.cov_norms[1:]) <= noise

    def test_iid_driver_uncorrelated(self):
        f = presets.default_observable()
        prof = decorrelation_profile(presets.iid_driver(), f, f, 6, 200_000, 3)
        noise = 4.0 / math.sqrt(200_000)
        assert max(prof.cov_norms[1:]) <= noise


class TestCltRateExperiment:
    def test_zero_observable_all_distances_zero(self):
        res = clt_rate_experiment(cat(), presets.zero_observable(),
                                  [8, 16, 32], 200, 1000, 0,
                                  mc_samples=1000, lag_cap=5)
        assert res.degenerate
        assert all(p == 0.0 for p in res.pi_hats)

    def test_small_smoke_run_monotone_floor(self):
        res = clt_rate_experiment(presets.iid_driver(),
                                  presets.bernoulli_observable(),
                                  [16, 64, 256], 400, 20_000, 1,
                                  tol=5e-3, lag_cap=5, mc_samples=20_000)
        assert res.fit is not None
        assert res.fit.slope < 0.0
        assert not res.degenerate
        assert res.floor == pytest.approx(1.0 / 40_000)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            clt_rate_experiment(cat(), presets.default_observable(),
                                [16, 16, 32], 100, 1000, 0)


class TestCoboundary:
    def test_zero_h(self):
        res = coboundary_degenerate_experiment(cat(), presets.zero_observable(),
                                               [8, 16, 32], 100, 0,
                                               lag_cap=5, mc_samples=1000)
        assert max(res.var_times_n) == 0.0
        assert all(p == 0.0 for p in res.pi_hats)

    def test_sin_coboundary_variance_bounded(self):
        h = presets.sin_x1_observable()
        res = coboundary_degenerate_experiment(cat(), h, [16, 64, 256, 1024],
                                               2000, 1, lag_cap=40,
                                               mc_samples=100_000)
        # telescoping: Var(S_n(g)) <= (2 sup h)^2 = 4, analytically = 1
        assert max(res.var_times_n) <= 4.0
        assert abs(res.var_slope) <= 0.1
        assert res.d_norm <= 0.02
        assert res.pi_fit is not None
        assert res.pi_fit.slope <= -0.25

    def test_telescoping_identity(self):
        A = cat()
        h = presets.sin_x1_observable()
        g = coboundary_observable(A, h)
        gen = np.random.default_rng(5)
        for _ in range(5):
            x = gen.random(2)
            n = int(gen.integers(1, 40))
            s = birkhoff_sum(A, g, n, x)
            shifted = x
            for _ in range(n):
                shifted = A.step(shifted)
            assert np.allclose(s, h(x) - h(shifted), atol=1e-10)


class TestCharDiagnostics:
    def test_zero_frequency(self):
        m = FiniteMeasure.from_samples(np.random.default_rng(0).normal(size=(50, 2)))
        sig = CovMatrix(np.eye(2))
        assert char_discrepancy(m, sig, [0.0, 0.0]) == 0.0

    def test_conjugate_symmetry(self):
        m = FiniteMeasure.from_samples(np.random.default_rng(1).normal(size=(50, 2)))
        sig = CovMatrix(np.eye(2))
        t = np.array([0.7, -1.3])
        a = char_discrepancy(m, sig, t)
        b = char_discrepancy(m, sig, -t)
        assert a == pytest.approx(b.conjugate())

    def test_gaussian_samples_small_discrepancy(self):
        n = 100_000
        sig = CovMatrix(np.eye(2))
        m = gaussian_sample(GaussianSpec(np.zeros(2), np.eye(2)), n, seed=2)
        for t1 in np.linspace(-2, 2, 5):
            for t2 in np.linspace(-2, 2, 5):
                val = char_discrepancy(m, sig, [t1, t2])
                assert abs(val) <= 5.0 / math.sqrt(n)

    def test_yurinskii_domain_shrinks_to_zero(self):
        m = gaussian_sample(GaussianSpec(np.zeros(2), np.eye(2)), 2000, seed=3)
        sig = CovMatrix(np.eye(2))
        tiny = yurinskii_integral(m, sig, 1e-3, grid_per_axis=8)
        mid = yurinskii_integral(m, sig, 1.0, grid_per_axis=8)
        assert tiny < mid / 50.0
        assert yurinskii_integral(m, sig, 1e-5, grid_per_axis=8) < tiny

    def test_yurinskii_scales_like_inverse_sqrt_n(self):
        sig = CovMatrix(np.eye(2))
        vals = []
        ns = [1000, 10_000, 100_000]
        for i, n in enumerate(ns):
            m = gaussian_sample(GaussianSpec(np.zeros(2), np.eye(2)), n, seed=10 + i)
            vals.append(yurinskii_integral(m, sig, 2.0, grid_per_axis=12))
        from limitlab.stats import fit_loglog
        fit = fit_loglog(ns, vals)
        assert -0.7 <= fit.slope <= -0.3
        assert vals[2] < vals[0]

    def test_yurinskii_rejects_coarse_grid(self):
        m = gaussian_sample(GaussianSpec(np.zeros(2), np.eye(2)), 100, seed=0)
        with pytest.raises(ValueError):
            yurinskii_integral(m, CovMatrix(np.eye(2)), 1.0, grid_per_axis=4)


class TestCovMatrix:
    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            CovMatrix(np.array([[1.0, 0.3], [0.1, 1.0]]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            CovMatrix(np.array([[1.0, 0.0], [0.0, -0.5]]))

    def test_clamp(self):
        m = CovMatrix(np.array([[1.0, 0.0], [0.0, -1e-9]]))
        clamped = m.clamped()
        assert clamped.min_eigenvalue() >= 0.0
