import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import make_cohort
from oracles import mp_fd_hessian
from subcohort.weibull import (
    ReparamWeibull,
    SurvivalParams,
    baseline_cum_hazard,
    hazard,
    interval_loglik,
    loglik_gradient,
    loglik_hessian,
    sample_interval_survival,
    survival,
    total_loglik,
)

P51 = SurvivalParams([0.1, 0.4], 6.3, 27900.0)


class TestBaseline:
    def test_at_scale(self):
        assert baseline_cum_hazard(27900.0, P51) == pytest.approx(1.0, rel=1e-15)

    def test_linear(self):
        assert baseline_cum_hazard(13950.0, SurvivalParams([0.0], 1.0, 27900.0)) == pytest.approx(0.5, rel=1e-15)

    def test_high_precision_value(self):
        # (20000/27900)^6.3 evaluated with mpmath at 40 digits
        assert baseline_cum_hazard(20000.0, P51) == pytest.approx(0.1227955113794233196664986, rel=1e-13)

    def test_negative_age(self):
        with pytest.raises(ValueError):
            baseline_cum_hazard(-1.0, P51)

    def test_monotone(self):
        t = np.linspace(0, 40000, 200)
        assert np.all(np.diff(baseline_cum_hazard(t, P51)) >= 0)


class TestHazard:
    def test_beta_zero_is_baseline(self):
        p = SurvivalParams([0.0, 0.0], 6.3, 27900.0)
        t = 22000.0
        assert hazard(t, [1.3, -2], p) == pytest.approx(6.3 / 27900 * (t / 27900) ** 5.3, rel=1e-13)

    def test_rescaling_invariance(self):
        p2 = SurvivalParams([0.05, 0.2], 6.3, 27900.0)
        assert hazard(22000.0, [2.0, 2.0], p2) == pytest.approx(hazard(22000.0, [1.0, 1.0], P51), rel=1e-13)

    def test_hazard_ratio(self):
        base = hazard(22000.0, [0.0, 0.0], P51)
        assert hazard(22000.0, [1.0, 1.0], P51) / base == pytest.approx(np.exp(0.5), rel=1e-13)

    def test_nonpositive_age(self):
        with pytest.raises(ValueError):
            hazard(0.0, [0, 0], P51)


class TestIntervalLoglik:
    def test_no_exposure(self):
        assert interval_loglik(20000.0, np.nextafter(20000.0, 1e9), 0, [1.0, 1.0], P51) == pytest.approx(0, abs=1e-12)

    def test_censored_beta_zero(self):
        p = SurvivalParams([0.0, 0.0], 6.3, 27900.0)
        lam = lambda t: (t / 27900) ** 6.3  # noqa: E731
        assert interval_loglik(18000.0, 25000.0, 0, [3, 3], p) == pytest.approx(-(lam(25000) - lam(18000)), rel=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_survival_ratio_oracle(self, seed):
        rng = np.random.default_rng(seed)
        lo = rng.uniform(16000, 26000)
        hi = lo + rng.uniform(10, 3650)
        x = rng.normal(size=2)
        got = np.exp(interval_loglik(lo, hi, 0, x, P51))
        assert got == pytest.approx(survival(hi, x, P51) / survival(lo, x, P51), rel=1e-12)

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            interval_loglik(20000.0, 20000.0, 0, [0, 0], P51)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(15000, 30000), st.floats(1, 4000), st.floats(1, 4000),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2))
    def test_censored_nonpositive_and_monotone(self, lo, d1, d2, x):
        l1 = interval_loglik(lo, lo + d1, 0, x, P51)
        l2 = interval_loglik(lo, lo + d1 + d2, 0, x, P51)
        assert l1 <= 0 and l2 <= l1


def naive_total(cohort, F, params):
    """Sum of log f(t)/S(t_lo) or log S(t)/S(t_lo) using scipy's Weibull
    with a covariate-adjusted scale b exp(-eta/a)."""
    rec = cohort.records
    a, b = params.shape_a, params.scale_b
    total = 0.0
    for j in range(cohort.N):
        for m in range(cohort.schedule.M + 1):
            if not rec.active[j, m]:
                continue
            eta = F[j, m] @ params.beta
            dist = stats.weibull_min(a, scale=b * np.exp(-eta / a))
            lo, hi = rec.t_lo[j, m], rec.t_hi[j, m]
            top = dist.logpdf(hi) if rec.delta[j, m] else dist.logsf(hi)
            total += top - dist.logsf(lo)
    return total


class TestTotalLoglik:
    def cohort(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        base = rng.uniform(45, 65, n)
        exit_ = base + rng.uniform(2, 35, n)
        event = (exit_ - base < 30).astype(int)
        vals = rng.normal(size=(n, 3, 2))
        return make_cohort(base, exit_, event, vals), vals

    def test_naive_oracle(self):
        c, vals = self.cohort()
        assert total_loglik(c, vals, P51) == pytest.approx(naive_total(c, vals, P51), rel=1e-10)

    def test_single_interval(self):
        c = make_cohort([50], [55], [1], [[[0.3, -0.2], [np.nan] * 2, [np.nan] * 2]])
        x = np.array([0.3, -0.2])
        assert total_loglik(c, c.panel.values, P51) == pytest.approx(
            float(interval_loglik(50 * 365.25, 55 * 365.25, 1, x, P51)), rel=1e-13)

    def test_additive_and_order_invariant(self):
        c, vals = self.cohort(n=1, seed=3)
        c2 = make_cohort(np.repeat(c.survival.baseline_age / 365.25, 2), np.repeat(c.survival.exit_age / 365.25, 2),
                         np.repeat(c.survival.event, 2), np.repeat(vals, 2, axis=0))
        assert total_loglik(c2, c2.panel.values, P51) == pytest.approx(2 * total_loglik(c, vals, P51), rel=1e-13)
        c3, v3 = self.cohort(seed=4)
        perm = np.random.default_rng(0).permutation(c3.N)
        c4 = make_cohort(c3.survival.baseline_age[perm] / 365.25, c3.survival.exit_age[perm] / 365.25,
                         c3.survival.event[perm], v3[perm])
        assert total_loglik(c4, v3[perm], P51) == pytest.approx(total_loglik(c3, v3, P51), rel=1e-12)

    def test_unfilled_missing(self):
        c, vals = self.cohort()
        vals = vals.copy()
        vals[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            total_loglik(c, vals, P51)


class TestDerivatives:
    def test_beta_block_closed_form(self):
        x = np.array([0.7, -1.2])
        lo, hi = 20000.0, 23000.0
        H = loglik_hessian(lo, hi, 1, x, P51)
        D = baseline_cum_hazard(hi, P51) - baseline_cum_hazard(lo, P51)
        np.testing.assert_allclose(H[:2, :2], -np.outer(x, x) * np.exp(x @ P51.beta) * D, rtol=1e-13)

    def test_zero_covariates(self):
        H = loglik_hessian(20000.0, 23000.0, 0, np.zeros(2), P51)
        np.testing.assert_array_equal(H[:2, :2], 0)

    @pytest.mark.parametrize("delta", [0, 1])
    def test_matches_high_precision_fd(self, delta):
        x = [0.4, -1.1]
        theta = [0.1, 0.4, 6.3, 27900.0]
        H = loglik_hessian(21000.0, 24500.0, delta, x, P51)
        np.testing.assert_allclose(H, mp_fd_hessian(21000.0, 24500.0, delta, x, theta), rtol=1e-7)

    def test_gradient_fd(self):
        x = np.array([0.4, -1.1])
        g = loglik_gradient(21000.0, 24500.0, 1, x, P51)
        th = P51.as_vector()
        for i in range(4):
            h = 1e-6 * max(abs(th[i]), 1)
            up, dn = th.copy(), th.copy()
            up[i] += h
            dn[i] -= h
            f = lambda v: interval_loglik(21000.0, 24500.0, 1, x, SurvivalParams(v[:2], v[2], v[3]))  # noqa: E731
            assert g[i] == pytest.approx((f(up) - f(dn)) / (2 * h), rel=1e-5, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(15000, 30000), st.floats(1, 4000), st.integers(0, 1),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2))
    def test_symmetric_and_beta_block_nsd(self, lo, d, delta, x):
        H = loglik_hessian(lo, lo + d, delta, x, P51)
        np.testing.assert_allclose(H, H.T, rtol=1e-12, atol=0)
        assert np.linalg.eigvalsh(H[:2, :2]).max() <= 1e-12 * max(1, abs(H[:2, :2]).max())

    def test_score_mean_zero_at_truth(self):
        # sum of per-record scores over simulated records at the true parameters
        rng = np.random.default_rng(7)
        n = 40000
        lo = rng.uniform(45, 65, n) * 365.25
        x = rng.normal(size=(n, 2))
        t, d = sample_interval_survival(lo, x, P51, lo + 3652.5, rng)
        g = loglik_gradient(lo, t, d, x, P51)
        z = g.mean(axis=0) / (g.std(axis=0, ddof=1) / np.sqrt(n))
        assert np.all(np.abs(z) < 4)


class TestReparam:
    @settings(max_examples=100)
    @given(st.floats(0.1, 20), st.floats(1.0, 1e6))
    def test_round_trip(self, a, b):
        p = SurvivalParams([0.0], a, b)
        back = SurvivalParams.from_reparam([0.0], p.to_reparam())
        assert back.shape_a == pytest.approx(a, rel=1e-12)
        assert back.scale_b == pytest.approx(b, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ReparamWeibull(0.0, 1.0)
        with pytest.raises(ValueError):
            SurvivalParams([0.0], -1.0, 1.0)


class TestSampling:
    def test_ks_against_truncated_survival(self):
        rng = np.random.default_rng(1)
        lo, hor = 22000.0, 22000.0 + 3652.5
        x = np.array([0.5, 1.0])
        t, d = sample_interval_survival(np.full(100_000, lo), np.tile(x, (100_000, 1)), P51, hor, rng)
        grid = np.linspace(lo, hor, 200)[:-1]
        emp = (t[None, :] > grid[:, None]).mean(axis=1)
        ana = survival(grid, x, P51) / survival(lo, x, P51)
        assert np.max(np.abs(emp - ana)) < 0.01
        assert np.all(t[d == 0] == hor)

    def test_huge_hazard(self):
        rng = np.random.default_rng(2)
        p = SurvivalParams([1.0], 6.3, 27900.0)
        t, d = sample_interval_survival(np.full(100, 20000.0), np.full((100, 1), 20.0), p, 23000.0, rng)
        assert np.all(d == 1) and np.all(t > 20000.0) and np.all(t - 20000.0 < 1e-3)

    def test_tiny_window(self):
        rng = np.random.default_rng(3)
        t, d = sample_interval_survival(np.full(1000, 20000.0), np.zeros((1000, 2)), P51, 20000.0 + 1e-6, rng)
        assert np.all(d == 0) and np.all(t == 20000.0 + 1e-6)
