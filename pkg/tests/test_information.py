import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conftest import make_cohort
from oracles import naive_d_beta
from subcohort.cohort import CohortError, truncate
from subcohort.harness.config import SIMULATION_COVARIATES, ExperimentConfig
from subcohort.harness.generate import generate_cohort
from subcohort.covariates import FeatureMap, ModelSpec
from subcohort.information import (
    DrawInputs,
    SingularInformationError,
    WaveProblem,
    assemble_psi,
    d_beta_batch,
    d_beta_value,
    draw_inputs,
    expected_info_from_draw,
    observed_info,
    utility,
)
from subcohort.mcmc import ChainSettings, run_chain
from subcohort.weibull import SurvivalParams, hazard, interval_loglik, loglik_hessian, survival

YEAR = 365.25


def random_pd(rng, p, cond=1e3):
    q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    ev = np.exp(rng.uniform(0, np.log(cond), size=p))
    scale = np.exp(rng.uniform(-3, 3, size=p))
    return (q * ev) @ q.T * np.outer(scale, scale)


class TestDBeta:
    def test_identity(self):
        assert d_beta_value(np.eye(4), 2) == 1.0

    def test_block_diagonal(self):
        assert d_beta_value(np.diag([2.0, 2.0, 5.0, 5.0]), 2) == pytest.approx(0.25, rel=1e-14)

    def test_naive_oracle(self):
        rng = np.random.default_rng(0)
        for H in (1, 2, 3):
            psi = random_pd(rng, H + 2)
            assert d_beta_value(psi, H) == pytest.approx(naive_d_beta(psi, H), rel=1e-10)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        stack = np.array([random_pd(rng, 4) for _ in range(6)])
        np.testing.assert_allclose(d_beta_batch(stack, 2), [d_beta_value(m, 2) for m in stack], rtol=1e-14)

    def test_singular_raises_with_index(self):
        rng = np.random.default_rng(2)
        stack = np.array([random_pd(rng, 3) for _ in range(3)])
        v = rng.normal(size=3)
        stack[1] = np.outer(v, v)
        with pytest.raises(SingularInformationError) as info:
            d_beta_batch(stack, 1)
        assert info.value.index == (1,)

    def test_indefinite_raises(self):
        with pytest.raises(SingularInformationError):
            d_beta_value(np.diag([1.0, -1.0, 1.0]), 1)

    def test_not_square(self):
        with pytest.raises(ValueError):
            d_beta_value(np.ones((3, 2)), 1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_loewner_monotone(self, seed, H):
        rng = np.random.default_rng(seed)
        psi = random_pd(rng, H + 2)
        g = rng.normal(size=(H + 2, 2))
        e = g @ g.T * np.exp(rng.uniform(-4, 2))
        assert d_beta_value(psi + e, H) <= d_beta_value(psi, H) * (1 + 1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_positive(self, seed):
        assert d_beta_value(random_pd(np.random.default_rng(seed), 4), 2) > 0


class TestObserved:
    P = SurvivalParams([0.3], 6.3, 27900.0)

    def cohort(self):
        vals = np.array([[0.5, 0.2, np.nan], [-1.0, -0.4, 0.1], [1.2, np.nan, np.nan]])
        return make_cohort([55, 60, 50], [70, 88, 65], [1, 0, 1], vals)

    def test_empty(self):
        c = make_cohort(np.empty(0), np.empty(0), np.empty(0, int), np.empty((0, 3, 1)))
        np.testing.assert_array_equal(observed_info(c, np.empty((0, 3, 1)), self.P), np.zeros((3, 3)))

    def test_sum_of_records(self):
        c = self.cohort()
        F = np.nan_to_num(c.panel.values)
        rec = c.records
        want = np.zeros((3, 3))
        for j, k in zip(*np.nonzero(rec.active)):
            want -= loglik_hessian(rec.t_lo[j, k], rec.t_hi[j, k], rec.delta[j, k], F[j, k], self.P)
        np.testing.assert_allclose(observed_info(c, F, self.P), want, rtol=1e-12)

    def test_finite_differences(self):
        c = self.cohort()
        F = np.nan_to_num(c.panel.values)
        rec, act = c.records, c.records.active
        theta = np.array([0.3, 6.3, 27900.0])

        def ll(th):
            p = SurvivalParams(th[:1], th[1], th[2])
            return sum(float(interval_loglik(rec.t_lo[j, k], rec.t_hi[j, k], rec.delta[j, k], F[j, k], p))
                       for j, k in zip(*np.nonzero(act)))

        h = theta * 1e-4
        fd = np.empty((3, 3))
        for i in range(3):
            for k in range(3):
                acc = 0.0
                for si, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    v = theta.copy()
                    v[i] += si * h[i]
                    v[k] += sk * h[k]
                    acc += si * sk * ll(v)
                fd[i, k] = acc / (4 * h[i] * h[k])
        got = observed_info(c, F, SurvivalParams([0.3], 6.3, 27900.0))
        np.testing.assert_allclose(got, -fd, rtol=1e-4, atol=1e-8 * np.abs(got).max())

    def test_incomplete_realization(self):
        c = self.cohort()
        with pytest.raises(ValueError):
            observed_info(c, c.panel.values, self.P)


def one_candidate_draw(beta, v, prev=0.4):
    params = SurvivalParams([beta], 6.3, 27900.0)
    return DrawInputs(params, (("continuous", 0.0, 1.0, v),), np.array([[prev]]))


def run_mc(draw, t_lo, hor, R, seed=0):
    rng = np.random.default_rng(seed)
    model = ModelSpec(FeatureMap.from_mapping(("x",), {}), ("continuous",))
    return expected_info_from_draw(draw, np.array([t_lo]), np.array([hor]), model, np.zeros(1),
                                   rng.standard_normal((1, R, 1)), rng.uniform(size=(1, R, 1)),
                                   rng.uniform(size=(1, R)))[0]


def quadrature_info(params, x, t_lo, hor):
    """E[-Hessian] over the next interval by numerical integration of the
    event density plus the censoring mass at the horizon."""
    s0 = survival(t_lo, [x], params)

    def integrand(t, i, k):
        f = hazard(t, [x], params) * survival(t, [x], params) / s0
        return -f * loglik_hessian(t_lo, t, 1, [x], params)[i, k]

    out = np.empty((3, 3))
    tail = survival(hor, [x], params) / s0 * -loglik_hessian(t_lo, hor, 0, [x], params)
    for i in range(3):
        for k in range(3):
            out[i, k] = integrate.quad(integrand, t_lo, hor, args=(i, k), epsrel=1e-10, limit=200)[0] + tail[i, k]
    return out


class TestExpected:
    def test_zero_exposure(self):
        d = one_candidate_draw(0.3, 1.0)
        t = 60 * YEAR
        np.testing.assert_array_equal(run_mc(d, t, t, 50), np.zeros((3, 3)))

    def test_quadrature_degenerate_process(self):
        # v = 0: the next value equals the previous one, so only survival is random
        d = one_candidate_draw(0.5, 0.0, prev=0.4)
        t_lo, hor = 70 * YEAR, 80 * YEAR
        want = quadrature_info(d.params, 0.4, t_lo, hor)
        got = run_mc(d, t_lo, hor, 200000)
        np.testing.assert_allclose(got, want, rtol=0.02, atol=1e-12)

    def test_symmetric_psd(self):
        d = one_candidate_draw(0.3, 0.5)
        e = run_mc(d, 65 * YEAR, 75 * YEAR, 500)
        np.testing.assert_allclose(e, e.T, rtol=1e-12)
        assert np.linalg.eigvalsh(e).min() > -1e-9 * np.abs(e).max()

    def test_frozen_inputs_deterministic(self):
        d = one_candidate_draw(0.3, 0.5)
        np.testing.assert_array_equal(run_mc(d, 65 * YEAR, 75 * YEAR, 100, seed=3),
                                      run_mc(d, 65 * YEAR, 75 * YEAR, 100, seed=3))


class TestAssemble:
    def test_additive(self):
        rng = np.random.default_rng(0)
        o, e1, e2 = (random_pd(rng, 3) for _ in range(3))
        np.testing.assert_allclose(assemble_psi(o, [e1, e2]), o + e1 + e2)
        np.testing.assert_array_equal(assemble_psi(o), o)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            assemble_psi(np.eye(3), [np.eye(4)])


def panel_cohort(n=300, seed=0):
    cfg = ExperimentConfig(covariates=SIMULATION_COVARIATES[:1], size=n)
    return generate_cohort(cfg, seed)


@pytest.fixture(scope="module")
def wave1():
    c = truncate(panel_cohort(), 1)
    model = ModelSpec.for_panel(c.panel)
    s = run_chain(c, model, settings=ChainSettings(2000, 1000, 6, 1))
    return c, model, s


class TestWaveProblem:
    def test_assumed_process_without_transitions(self, wave1):
        c, model, s = wave1
        d = draw_inputs(s, 0, c, model, [0, 1], 1)
        kind, cc, g, v = d.process[0]
        x0 = c.panel.values[:, 0, 0]
        assert (cc, g) == (0.0, 0.5)
        assert v == pytest.approx(0.75 * np.var(x0, ddof=1), rel=1e-12)

    def test_build_shapes_and_utility(self, wave1):
        c, model, s = wave1
        prob = WaveProblem.build(c, 1, s, model, 10, np.random.default_rng(0))
        q, C = len(s), prob.candidates.size
        assert prob.observed.shape == (q, 3, 3) and prob.expected.shape == (q, C, 3, 3)
        base = utility(prob, [])
        assert base == pytest.approx(-np.mean([naive_d_beta(o, 1) for o in prob.observed]), rel=1e-8)
        u = utility(prob, [0, 3, 5])
        assert u == utility(prob, [5, 0, 3])
        assert u >= base

    def test_realization_oracle(self, wave1):
        c, model, s = wave1
        prob = WaveProblem.build(c, 1, s, model, 10, np.random.default_rng(0))
        l = 2
        F = s.realization(l) - c.panel.centering_offsets
        np.testing.assert_allclose(prob.observed[l], observed_info(c, F, s.survival_params(l)), rtol=1e-12)

    def test_wrong_wave(self, wave1):
        c, model, s = wave1
        with pytest.raises(CohortError):
            WaveProblem.build(c, 2, s, model, 10, np.random.default_rng(0))

    def test_stale_posterior(self, wave1):
        c, model, s = wave1
        vals = c.panel.values.copy()
        vals[0, 0, 0] = np.nan
        other = make_cohort(c.survival.baseline_age / YEAR, c.survival.exit_age / YEAR, c.survival.event, vals)
        other = truncate(other, 1)
        with pytest.raises(CohortError):
            WaveProblem.build(other, 1, s, model, 10, np.random.default_rng(0))


class TestExpectedOracles:
    def test_beta_block_closed_form(self):
        # beta = 0, v = 0: -H_bb = x^2 * (Lambda0(T) - Lambda0(t_lo)) and the
        # increment is a unit exponential truncated at the horizon increment
        x, t_lo, hor = 0.7, 70 * YEAR, 80 * YEAR
        d = one_candidate_draw(0.0, 0.0, prev=x)
        D = (hor / 27900.0) ** 6.3 - (t_lo / 27900.0) ** 6.3
        got = run_mc(d, t_lo, hor, 100000)[0, 0]
        assert got == pytest.approx(x * x * -np.expm1(-D), rel=0.01)

    def test_mc_self_consistency(self):
        d = one_candidate_draw(0.3, 0.6)
        a = run_mc(d, 68 * YEAR, 78 * YEAR, 100000, seed=1)
        b = run_mc(d, 68 * YEAR, 78 * YEAR, 100000, seed=2)
        np.testing.assert_allclose(a, b, rtol=0.02)


class TestRealization:
    def test_observed_plus_realized_intervals(self):
        # expectations replaced by realized intervals: the wave-1 intervals of
        # a complete cohort added to the wave-0 information
        full = truncate(panel_cohort(n=150, seed=3), 2)
        early = truncate(full, 1)
        p = SurvivalParams([0.2], 6.3, 27900.0)
        F = full.panel.values - full.panel.centering_offsets
        Fe = early.panel.values - early.panel.centering_offsets
        rec = full.records
        extra = [-loglik_hessian(rec.t_lo[j, 1], rec.t_hi[j, 1], rec.delta[j, 1], F[j, 1], p)
                 for j in np.flatnonzero(rec.active[:, 1])]
        # both cohorts are centered on the same baseline values
        np.testing.assert_array_equal(F[:, 0], Fe[:, 0])
        np.testing.assert_allclose(assemble_psi(observed_info(early, Fe, p), extra),
                                   observed_info(full, F, p), rtol=1e-12)


def test_covariate_permutation_invariance():
    rng = np.random.default_rng(4)
    psi = random_pd(rng, 5)
    perm = [2, 0, 1, 3, 4]
    assert d_beta_value(psi[np.ix_(perm, perm)], 3) == pytest.approx(d_beta_value(psi, 3), rel=1e-12)
