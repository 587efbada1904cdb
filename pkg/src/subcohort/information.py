"""Observed and expected Fisher information for the piecewise Weibull PH
model and the D_beta criterion.

Information matrices are (P+2) x (P+2) numpy arrays in the parameter order
(beta_1..beta_P, a, b).  The mixed information used when selecting for
wave m is

    observed information of every interval already followed up
  + expected information of the next interval of each selected candidate,

and D_beta is the determinant of the beta block of its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import BINARY, Cohort, CohortError, at_risk
from .covariates import ModelSpec
from .mcmc import PosteriorSample
from .weibull import SurvivalParams, hessian_unchecked, invert_survival

_PIVOT_TOL = 1e-12


class SingularInformationError(ArithmeticError):
    """The information matrix is not positive definite.  ``index`` locates
    the offending matrix in a batch."""

    def __init__(self, message: str, index: tuple | None = None):
        self.index = index
        super().__init__(message if index is None else f"{message} (at {index})")


def d_beta_batch(psi: np.ndarray, H: int) -> np.ndarray:
    """D_beta for a stack of information matrices (..., p, p).

    One Cholesky factorization per matrix with the nuisance parameters
    ordered first: the trailing H x H block of the factor is then a factor
    of the Schur complement, i.e. of the inverse of the beta block of
    psi^{-1}.  Matrices are equilibrated to unit diagonal first.
    """
    psi = np.asarray(psi, float)
    p = psi.shape[-1]
    if psi.shape[-2] != p or not 1 <= H < p + 1:
        raise ValueError("psi must be square with at least H rows")
    perm = list(range(H, p)) + list(range(H))
    Pm = psi[..., perm, :][..., :, perm]
    diag = np.diagonal(Pm, axis1=-2, axis2=-1)
    bad = ~(diag > 0)
    if bad.any():
        raise SingularInformationError("information matrix has a nonpositive diagonal",
                                       _first_index(bad.any(axis=-1)))
    s = 1.0 / np.sqrt(diag)
    Ps = Pm * s[..., :, None] * s[..., None, :]
    try:
        L = np.linalg.cholesky(Ps)
    except np.linalg.LinAlgError:
        _locate_failure(Ps)
        raise
    piv = np.diagonal(L, axis1=-2, axis2=-1)
    bad = ~(piv**2 > _PIVOT_TOL)
    if bad.any():
        raise SingularInformationError("information matrix is numerically singular", _first_index(bad.any(axis=-1)))
    sb = s[..., p - H:]
    lb = piv[..., p - H:]
    return np.exp(2.0 * (np.log(sb).sum(axis=-1) - np.log(lb).sum(axis=-1)))


def _first_index(mask):
    idx = np.argwhere(np.atleast_1d(mask))
    return tuple(int(i) for i in idx[0]) if mask.ndim else ()


def _locate_failure(Ps):
    flat = Ps.reshape((-1,) + Ps.shape[-2:])
    for i, m in enumerate(flat):
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise SingularInformationError("information matrix is not positive definite",
                                           tuple(int(v) for v in np.unravel_index(i, Ps.shape[:-2]))) from None


def d_beta_value(psi: np.ndarray, H: int) -> float:
    """Determinant of the H x H upper-left block of psi^{-1}."""
    return float(d_beta_batch(np.asarray(psi, float)[None], H)[0])


def observed_info(cohort: Cohort, features: np.ndarray, params: SurvivalParams) -> np.ndarray:
    """Sum of minus the interval Hessians over every followed-up record."""
    rec = cohort.records
    K = cohort.followed_to
    F = np.asarray(features, float)
    P = F.shape[-1]
    act = rec.active
    if not act.any():
        return np.zeros((P + 2, P + 2))
    X = F[:, :K, :][act]
    if np.any(np.isnan(X)):
        raise ValueError("covariate realization is incomplete on followed-up intervals")
    Hs = hessian_unchecked(rec.t_lo[act], rec.t_hi[act], rec.delta[act].astype(float), X,
                           params.beta, params.shape_a, params.scale_b)
    return -Hs.sum(axis=0)


def assemble_psi(observed: np.ndarray, selected_expected: Sequence[np.ndarray] = ()) -> np.ndarray:
    psi = np.array(observed, float)
    for e in selected_expected:
        e = np.asarray(e, float)
        if e.shape != psi.shape:
            raise ValueError(f"shape mismatch: {e.shape} vs {psi.shape}")
        psi = psi + e
    return psi


# --------------------------------------------------------------------------
# expected information of candidates


@dataclass(frozen=True)
class MCInputs:
    """Frozen random inputs for the expected-information integrals:
    normals and uniforms for the covariate step, uniforms for survival."""

    normals: np.ndarray  # (q, C, R, H)
    uniforms_cov: np.ndarray  # (q, C, R, H)
    uniforms_surv: np.ndarray  # (q, C, R)

    @classmethod
    def draw(cls, q: int, C: int, R: int, H: int, rng: np.random.Generator) -> "MCInputs":
        return cls(rng.standard_normal((q, C, R, H)), rng.uniform(size=(q, C, R, H)),
                   rng.uniform(size=(q, C, R)))


@dataclass(frozen=True)
class DrawInputs:
    """Per-draw quantities feeding one candidate's expected information.

    ``process`` holds, per raw covariate, either ('continuous', c, gamma, v)
    or ('binary', p0, p1) with p_s = P(next = 1 | prev = s).
    """

    params: SurvivalParams
    process: tuple
    prev: np.ndarray  # (C, H) raw values at the previous wave


def simulate_candidate_intervals(draw: DrawInputs, t_lo, horizon, model: ModelSpec, offsets,
                                 normals, uniforms_cov, uniforms_surv):
    """Simulate (features, exit age, delta) for the next interval of each
    candidate: shapes (C, R, P), (C, R), (C, R)."""
    prev = np.asarray(draw.prev, float)
    x = np.empty(normals.shape)
    for h, spec in enumerate(draw.process):
        if spec[0] == BINARY:
            _, p0, p1 = spec
            p = np.where(prev[:, h] == 1, p1, p0)[:, None]
            x[..., h] = (uniforms_cov[..., h] < p).astype(float)
        else:
            _, c, g, v = spec
            mean = c + g * (prev[:, h] - offsets[h])
            x[..., h] = mean[:, None] + np.sqrt(v) * normals[..., h] + offsets[h]
    F = model.feature_map.expand(x - offsets)
    eta = F @ draw.params.beta
    t, d = invert_survival(np.asarray(t_lo)[:, None], eta, draw.params.shape_a, draw.params.scale_b,
                           np.asarray(horizon)[:, None], uniforms_surv)
    return F, t, d


def expected_info_from_draw(draw: DrawInputs, t_lo, horizon, model: ModelSpec, offsets,
                            normals, uniforms_cov, uniforms_surv) -> np.ndarray:
    """Monte Carlo expected information, shape (C, P+2, P+2)."""
    F, t, d = simulate_candidate_intervals(draw, t_lo, horizon, model, offsets, normals, uniforms_cov,
                                           uniforms_surv)
    lo = np.broadcast_to(np.asarray(t_lo, float)[:, None], t.shape)
    Hs = hessian_unchecked(lo, t, d.astype(float), F, draw.params.beta, draw.params.shape_a,
                           draw.params.scale_b)
    return -Hs.mean(axis=1)


def expected_candidate_info(cohort: Cohort, candidate: int, wave: int, draw: DrawInputs,
                            model: ModelSpec, mc_reps: int, rng: np.random.Generator) -> np.ndarray:
    """Expected information of one candidate's next interval under one
    posterior draw (``draw.prev`` holds that candidate's previous values,
    shape (1, H) or (H,))."""
    if candidate not in set(at_risk(cohort, wave).tolist()):
        raise CohortError(f"candidate {cohort.ids[candidate]} is not at risk at wave {wave}")
    A = cohort.wave_ages
    H = cohort.H
    draw = DrawInputs(draw.params, draw.process, np.asarray(draw.prev, float).reshape(1, H))
    mc = MCInputs.draw(1, 1, mc_reps, H, rng)
    return expected_info_from_draw(draw, A[[candidate], wave], A[[candidate], wave + 1], model,
                                   cohort.panel.centering_offsets, mc.normals[0], mc.uniforms_cov[0],
                                   mc.uniforms_surv[0])[0]


def _has_transitions(cohort: Cohort, h: int) -> bool:
    obs = cohort.observed_mask()[..., h]
    return obs.shape[1] > 1 and bool((obs[:, 1:] & obs[:, :-1]).any())


def _baseline_variance(cohort: Cohort, h: int) -> float:
    x = cohort.panel.values[:, 0, h]
    x = x[~np.isnan(x)]
    return float(np.var(x, ddof=1)) if x.size > 1 else 1.0


def draw_inputs(sample: PosteriorSample, l: int, cohort: Cohort, model: ModelSpec, candidates, wave: int) -> DrawInputs:
    """Assemble :class:`DrawInputs` for posterior draw ``l``.  Covariates
    without any observed transition use the model's assumed process
    instead of the (then prior-driven) posterior draw."""
    from scipy.special import expit

    process = []
    for h, (name, kind) in enumerate(zip(model.names, model.kinds)):
        assumed = None if _has_transitions(cohort, h) else model.assumption(name)
        if kind == BINARY:
            if assumed is None:
                d0 = sample.param(f"d0:{name}")[l]
                d1 = sample.param(f"d1:{name}")[l]
                process.append((BINARY, float(expit(d0)), float(expit(d0 + d1))))
            else:
                process.append((BINARY, assumed.p_zero_to_one, 1.0 - assumed.p_one_to_zero))
        elif assumed is None:
            process.append(("continuous", sample.param(f"c:{name}")[l], sample.param(f"gamma:{name}")[l],
                            sample.param(f"v:{name}")[l]))
        else:
            pp = assumed.params(_baseline_variance(cohort, h))
            process.append(("continuous", pp.c, pp.gamma, pp.v))
    prev = sample.realization(l)[np.asarray(candidates, int), wave - 1, :]
    return DrawInputs(sample.survival_params(l), tuple(process), prev)


@dataclass(frozen=True)
class WaveProblem:
    """Everything the greedy search needs for one wave: per-draw observed
    information (q, p, p) and per-(draw, candidate) expected information
    (q, C, p, p), computed once and reused across greedy steps."""

    wave: int
    candidates: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    H: int
    draws: tuple
    mc: MCInputs

    @classmethod
    def build(cls, cohort: Cohort, wave: int, sample: PosteriorSample, model: ModelSpec,
              mc_reps: int, rng: np.random.Generator) -> "WaveProblem":
        if cohort.followed_to != wave:
            raise CohortError(f"cohort is followed to wave {cohort.followed_to}, selection is for wave {wave}")
        if wave > cohort.schedule.M:
            raise CohortError(f"no measurement wave {wave}")
        if sample.meta.get("fingerprint") not in (None, cohort.fingerprint()):
            raise CohortError("posterior was not fitted to the data available before this wave")
        cand = at_risk(cohort, wave)
        q, C, H = len(sample), cand.size, cohort.H
        P = model.feature_map.P
        mc = MCInputs.draw(q, C, mc_reps, H, rng)
        A = cohort.wave_ages
        t_lo, horizon = A[cand, wave], A[cand, wave + 1]
        offsets = cohort.panel.centering_offsets
        observed = np.empty((q, P + 2, P + 2))
        expected = np.empty((q, C, P + 2, P + 2))
        draws = []
        for l in range(q):
            d = draw_inputs(sample, l, cohort, model, cand, wave)
            draws.append(d)
            real = sample.realization(l)
            F = model.feature_map.expand(real - offsets)
            observed[l] = observed_info(cohort, F, d.params)
            if C:
                expected[l] = expected_info_from_draw(d, t_lo, horizon, model, offsets, mc.normals[l],
                                                      mc.uniforms_cov[l], mc.uniforms_surv[l])
        return cls(wave, cand, observed, expected, P, tuple(draws), mc)


def utility(problem: WaveProblem, selected: Sequence[int]) -> float:
    """Minus the draw-averaged D_beta when the candidates at positions
    ``selected`` (indices into ``problem.candidates``) are measured."""
    psi = problem.observed + problem.expected[:, list(selected)].sum(axis=1)
    try:
        return -float(d_beta_batch(psi, problem.H).mean())
    except SingularInformationError as exc:
        raise SingularInformationError("singular information", (("draw", exc.index[0]),)) from None
