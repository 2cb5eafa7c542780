import numpy as np
import pytest
import scipy.special
import scipy.stats

from quantimp.ensemble import (PRESETS, aggregate_mixture, ensemble_stats,
                               fit_gaussian_to_quantiles, gaussian_nll,
                               masked_quantile_loss, normal_quantile, pinball,
                               pinball_max_form, predictive_quantile,
                               quantile_score, resolve_levels)


class TestPinball:
    def test_zero_residual(self):
        assert pinball(1.7, 1.7, 0.3) == 0.0

    def test_over_prediction_weighted_by_q(self):
        assert np.isclose(pinball(2.0, 1.0, 0.9), 0.9)

    def test_under_prediction_weighted_by_one_minus_q(self):
        assert np.isclose(pinball(1.0, 2.0, 0.9), 0.1)

    def test_two_form_equivalence_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(100_000) * 10
        y = rng.standard_normal(100_000) * 10
        q = rng.uniform(0.01, 0.99, size=100_000)
        assert np.array_equal(pinball(x, y, q), pinball_max_form(x, y, q))

    def test_convex_in_prediction(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            y = rng.standard_normal()
            q = rng.uniform(0.01, 0.99)
            x1, x2 = sorted(rng.standard_normal(2))
            mid = pinball(0.5 * (x1 + x2), y, q)
            avg = 0.5 * (pinball(x1, y, q) + pinball(x2, y, q))
            assert mid <= avg + 1e-12

    def test_quantile_score_is_mirrored_pinball(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(1000)
        y = rng.standard_normal(1000)
        q = rng.uniform(0.01, 0.99, size=1000)
        assert np.allclose(quantile_score(x, y, q), pinball(x, y, 1.0 - q))

    def test_quantile_score_minimized_at_quantile(self):
        # empirical check of the defining property of the orientation
        rng = np.random.default_rng(3)
        y = rng.standard_normal(200_000)
        for q in (0.1, 0.5, 0.9):
            target = np.quantile(y, q)
            base = quantile_score(target, y, q).mean()
            for off in (-0.3, 0.3):
                assert base < quantile_score(target + off, y, q).mean()


class TestMaskedQuantileLoss:
    def test_perfect_heads(self):
        x = np.ones((3, 2))
        v = np.broadcast_to(x, (4, 3, 2))
        out = masked_quantile_loss(x, np.ones_like(x), v, [0.2, 0.4, 0.6, 0.8])
        assert out.raw == 0.0 and not out.empty_support

    def test_empty_mask_flagged(self):
        x = np.ones((3, 2))
        v = np.zeros((2, 3, 2))
        out = masked_quantile_loss(x, np.zeros_like(x), v, [0.1, 0.9])
        assert out.raw == 0.0 and out.normalized == 0.0
        assert out.empty_support

    def test_two_head_hand_sum(self):
        # hand sum of the two terms: head at q=0.1 over-predicts by 1
        # -> (1-0.1)*1; head at q=0.9 under-predicts by 1 -> 0.9*1
        x = np.array([[1.0]])
        v = np.array([[[2.0]], [[0.0]]])
        out = masked_quantile_loss(x, np.ones_like(x), v, [0.1, 0.9])
        assert np.isclose(out.raw, 1.8)
        assert np.isclose(out.normalized, 0.9)
        assert out.n_obs == 1

    def test_mask_zeroes_terms(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 3))
        v = rng.standard_normal((2, 5, 3))
        m = (rng.random((5, 3)) < 0.5).astype(float)
        full = masked_quantile_loss(x, m, v, [0.3, 0.7])
        v2 = v.copy()
        v2[:, m == 0] = 123.0  # masked cells must not matter
        again = masked_quantile_loss(x, m, v2, [0.3, 0.7])
        assert full.raw == again.raw


class TestMixture:
    def test_two_member_hand_values(self):
        u, s2 = aggregate_mixture(np.array([0.0, 2.0]), np.array([1.0, 1.0]))
        assert u == 1.0 and s2 == 2.0

    def test_identical_members_degenerate(self):
        u, s2 = aggregate_mixture(np.array([3.0, 3.0, 3.0]),
                                  np.array([0.5, 0.5, 0.5]))
        assert u == 3.0 and np.isclose(s2, 0.5)

    def test_zero_vars_reduce_to_population_variance(self):
        rng = np.random.default_rng(5)
        means = rng.standard_normal(7)
        _, s2 = aggregate_mixture(means, np.zeros(7))
        assert np.isclose(s2, np.var(means), atol=1e-12)

    def test_brute_force_oracle(self):
        # two-pass oracle: total variance = mean of (var + mean^2) minus
        # square of the grand mean, computed cell by cell in a loop
        rng = np.random.default_rng(6)
        means = rng.standard_normal((5, 4, 3))
        varis = rng.random((5, 4, 3))
        u, s2 = aggregate_mixture(means, varis)
        for i in range(4):
            for j in range(3):
                mu = sum(means[n, i, j] for n in range(5)) / 5
                ex2 = sum(varis[n, i, j] + means[n, i, j] ** 2
                          for n in range(5)) / 5
                assert abs(u[i, j] - mu) < 1e-10
                assert abs(s2[i, j] - (ex2 - mu * mu)) < 1e-10

    def test_variance_clamped_nonnegative(self):
        u, s2 = aggregate_mixture(np.full(5, 0.1), np.zeros(5))
        assert s2 >= 0.0

    def test_empty_ensemble_is_error(self):
        with pytest.raises(ValueError):
            aggregate_mixture(np.zeros(0), np.zeros(0))


class TestGaussianNll:
    def test_unit_variance_zero_loss(self):
        assert gaussian_nll(1.0, np.zeros(3)) == 0.0

    def test_unit_variance_mean_two(self):
        assert np.isclose(gaussian_nll(1.0, np.array([2.0, 2.0])), 1.0)

    def test_log_term_only(self):
        assert np.isclose(gaussian_nll(np.e ** 2, np.zeros(2)), 1.0)

    def test_floor_keeps_finite(self):
        out = gaussian_nll(0.0, np.array([0.5]), var_floor=1e-6)
        assert np.isfinite(out)


class TestNormalQuantile:
    def test_against_scipy(self):
        p = np.linspace(1e-4, 1 - 1e-4, 5001)
        ours = normal_quantile(p)
        ref = scipy.special.ndtri(p)
        assert np.max(np.abs(ours - ref)) < 1e-8

    def test_median_is_exactly_zero(self):
        assert normal_quantile(0.5) == 0.0

    def test_domain_validation(self):
        for bad in (0.0, 1.0, -0.2, 1.2):
            with pytest.raises(ValueError):
                normal_quantile(bad)


class TestPredictiveQuantile:
    def test_median_is_mean(self):
        assert predictive_quantile(1.25, 4.0, 0.5) == 1.25

    def test_upper_tail_against_independent_table(self):
        ref = scipy.stats.norm.ppf(0.975)
        assert abs(predictive_quantile(0.0, 1.0, 0.975) - ref) < 1e-8
        assert abs(predictive_quantile(0.0, 1.0, 0.975) - 1.959964) < 1e-5

    def test_noncrossing_monotone(self):
        rng = np.random.default_rng(7)
        qs = np.linspace(0.01, 0.99, 99)
        for _ in range(100):
            u = rng.standard_normal() * 5
            s2 = rng.random() * 4
            vals = predictive_quantile(u, s2, qs)
            assert np.all(np.diff(vals) >= 0)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            u, s2 = rng.standard_normal(), rng.random()
            a = rng.uniform(0.1, 10)
            q = rng.uniform(0.01, 0.99)
            lhs = predictive_quantile(a * u, a * a * s2, q)
            rhs = a * predictive_quantile(u, s2, q)
            assert np.isclose(lhs, rhs, rtol=1e-12)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            predictive_quantile(0.0, -1e-3, 0.5)


class TestGaussianFit:
    def test_exact_recovery(self):
        levels = PRESETS["Q1"]
        z = normal_quantile(levels)
        u_true, s_true = 0.7, 1.9
        heads = u_true + s_true * z
        u, s2 = fit_gaussian_to_quantiles(heads, levels)
        assert np.isclose(u, u_true) and np.isclose(np.sqrt(s2), s_true)

    def test_collapsed_heads_give_point_mass(self):
        heads = np.full(5, 2.5)
        u, s2 = fit_gaussian_to_quantiles(heads, PRESETS["Q1"])
        assert u == 2.5 and s2 == 0.0

    def test_ensemble_stats_modes(self):
        rng = np.random.default_rng(9)
        heads = rng.standard_normal((5, 6, 2))
        u1, v1 = ensemble_stats(heads, PRESETS["Q1"], "dispersion")
        assert np.allclose(u1, heads.mean(axis=0))
        assert np.allclose(v1, heads.var(axis=0), atol=1e-12)
        u2, v2 = ensemble_stats(heads, PRESETS["Q1"],
                                "fit_gaussian_to_quantiles")
        assert u2.shape == (6, 2) and np.all(v2 >= 0)
        with pytest.raises(ValueError):
            ensemble_stats(heads, PRESETS["Q1"], "bogus")


class TestLevels:
    def test_presets(self):
        assert resolve_levels("Q1").tolist() == [0.1, 0.25, 0.5, 0.75, 0.9]
        assert len(resolve_levels("Q2")) == 9
        assert len(resolve_levels("Q3")) == 19
        for name in ("Q1", "Q2", "Q3"):
            q = resolve_levels(name)
            assert np.all(np.diff(q) > 0) and np.all((q > 0) & (q < 1))

    def test_validation(self):
        with pytest.raises(ValueError):
            resolve_levels("Q9")
        with pytest.raises(ValueError):
            resolve_levels([0.5, 0.5])
        with pytest.raises(ValueError):
            resolve_levels([0.0, 0.5])
        with pytest.raises(ValueError):
            resolve_levels([])
