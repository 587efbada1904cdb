"""Piecewise Weibull proportional-hazards model.

Baseline hazard (a/b)(t/b)^(a-1), cumulative hazard (t/b)^a, covariates
acting through exp(beta' x).  Each survival record is an interval
(t_lo, t_hi] left-truncated at t_lo.  Derivatives are taken with respect to
(beta_1..beta_H, a, b).

All functions broadcast over leading dimensions: ``x`` has shape (..., H)
and the time arguments shape (...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort


@dataclass(frozen=True)
class SurvivalParams:
    beta: np.ndarray
    shape_a: float
    scale_b: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, float))
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if not (self.shape_a > 0 and self.scale_b > 0):
            raise ValueError("Weibull shape and scale must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "shape_a", float(self.shape_a))
        object.__setattr__(self, "scale_b", float(self.scale_b))

    def to_reparam(self) -> "ReparamWeibull":
        return ReparamWeibull(r=self.shape_a, alpha=-self.shape_a * np.log(self.scale_b))

    @classmethod
    def from_reparam(cls, beta, rep: "ReparamWeibull") -> "SurvivalParams":
        return cls(beta, rep.r, np.exp(-rep.alpha / rep.r))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.shape_a, self.scale_b]])


@dataclass(frozen=True)
class ReparamWeibull:
    """r = a, alpha = -a log b, so that the cumulative hazard is t^r e^alpha."""

    r: float
    alpha: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("r must be positive")


def _log_cum_hazard(t, a, b):
    return a * (np.log(t) - np.log(b))


def baseline_cum_hazard(t, params: SurvivalParams):
    t = np.asarray(t, float)
    if np.any(t < 0):
        raise ValueError("age must be nonnegative")
    with np.errstate(divide="ignore"):
        return np.exp(_log_cum_hazard(t, params.shape_a, params.scale_b))


def hazard(t, x, params: SurvivalParams):
    t = np.asarray(t, float)
    if np.any(t <= 0):
        raise ValueError("hazard needs a positive age")
    a, b = params.shape_a, params.scale_b
    eta = np.asarray(x, float) @ params.beta
    return np.exp(np.log(a / b) + (a - 1) * (np.log(t) - np.log(b)) + eta)


def survival(t, x, params: SurvivalParams):
    eta = np.asarray(x, float) @ params.beta
    return np.exp(-baseline_cum_hazard(t, params) * np.exp(eta))


def _check_interval(t_lo, t_hi):
    t_lo = np.asarray(t_lo, float)
    t_hi = np.asarray(t_hi, float)
    if np.any(t_hi <= t_lo) or np.any(t_lo <= 0):
        raise ValueError("interval needs 0 < t_lo < t_hi")
    return t_lo, t_hi


def interval_loglik(t_lo, t_hi, delta, x, params: SurvivalParams):
    """log of f(t_hi)/S(t_lo) (delta=1) or S(t_hi)/S(t_lo) (delta=0)."""
    t_lo, t_hi = _check_interval(t_lo, t_hi)
    return _interval_loglik(t_lo, t_hi, np.asarray(delta), np.asarray(x, float) @ params.beta,
                            params.shape_a, params.scale_b)


def _interval_loglik(t_lo, t_hi, delta, eta, a, b):
    lam_hi = np.exp(_log_cum_hazard(t_hi, a, b))
    lam_lo = np.exp(_log_cum_hazard(t_lo, a, b))
    log_h = np.log(a / b) + (a - 1) * (np.log(t_hi) - np.log(b)) + eta
    return np.where(delta == 1, log_h, 0.0) - np.exp(eta) * (lam_hi - lam_lo)


def total_loglik(cohort: Cohort, features: np.ndarray, params: SurvivalParams) -> float:
    """Sum of interval log-likelihoods over every record of every individual.

    ``features`` is the complete model-feature realization, shape
    (N, K, P) with K >= ``cohort.followed_to``.
    """
    rec = cohort.records
    K = cohort.followed_to
    F = np.asarray(features, float)[:, :K, :]
    act = rec.active
    if np.any(np.isnan(F[act])):
        raise ValueError("covariate realization has unfilled missing values")
    if not act.any():
        return 0.0
    ll = _interval_loglik(rec.t_lo[act], rec.t_hi[act], rec.delta[act], F[act] @ params.beta,
                          params.shape_a, params.scale_b)
    return float(ll.sum())


def _derivative_pieces(t_lo, t_hi, a, b):
    u_hi = np.log(t_hi) - np.log(b)
    u_lo = np.log(t_lo) - np.log(b)
    L_hi = np.exp(a * u_hi)
    L_lo = np.exp(a * u_lo)
    D = L_hi - L_lo
    Da = u_hi * L_hi - u_lo * L_lo
    Daa = u_hi**2 * L_hi - u_lo**2 * L_lo
    return u_hi, D, Da, Daa


def loglik_gradient(t_lo, t_hi, delta, x, params: SurvivalParams) -> np.ndarray:
    """Score of ``interval_loglik`` in (beta, a, b), shape (..., H+2)."""
    t_lo, t_hi = _check_interval(t_lo, t_hi)
    x = np.asarray(x, float)
    a, b = params.shape_a, params.scale_b
    d = np.asarray(delta, float)
    w = np.exp(x @ params.beta)
    u_hi, D, Da, _ = _derivative_pieces(t_lo, t_hi, a, b)
    g_beta = (d - w * D)[..., None] * x
    g_a = d * (1.0 / a + u_hi) - w * Da
    g_b = -d * a / b + w * (a / b) * D
    return np.concatenate([g_beta, g_a[..., None], g_b[..., None]], axis=-1)


def loglik_hessian(t_lo, t_hi, delta, x, params: SurvivalParams) -> np.ndarray:
    """Analytic Hessian of ``interval_loglik`` in (beta, a, b).

    Shape (..., H+2, H+2).
    """
    t_lo, t_hi = _check_interval(t_lo, t_hi)
    return hessian_unchecked(t_lo, t_hi, np.asarray(delta, float), np.asarray(x, float),
                             params.beta, params.shape_a, params.scale_b)


def hessian_unchecked(t_lo, t_hi, delta, x, beta, a, b):
    """Hessian kernel without input validation.  ``beta``, ``a`` and ``b``
    may carry leading batch dimensions broadcastable against the records."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    H = x.shape[-1]
    w = np.exp(np.einsum("...h,...h->...", x, np.broadcast_to(beta, x.shape)))
    u_hi, D, Da, Daa = _derivative_pieces(t_lo, t_hi, a, b)
    wD = w * D
    out = np.empty(np.broadcast_shapes(x.shape[:-1], np.shape(wD)) + (H + 2, H + 2))
    out[..., :H, :H] = -wD[..., None, None] * x[..., :, None] * x[..., None, :]
    h_ba = -(w * Da)[..., None] * x
    h_bb = (wD * a / b)[..., None] * x
    out[..., :H, H] = h_ba
    out[..., H, :H] = h_ba
    out[..., :H, H + 1] = h_bb
    out[..., H + 1, :H] = h_bb
    out[..., H, H] = -delta / a**2 - w * Daa
    out[..., H + 1, H + 1] = delta * a / b**2 - wD * a * (a + 1) / b**2
    Dab = -(D + a * Da) / b
    out[..., H, H + 1] = out[..., H + 1, H] = -delta / b - w * Dab
    return out


def sample_interval_survival(t_lo, x, params: SurvivalParams, horizon_age, rng: np.random.Generator):
    """Draw the exit age within (t_lo, horizon] by inverting the
    left-truncated conditional survival function.

    Returns (t, delta); draws beyond the horizon are censored there.
    """
    t_lo = np.asarray(t_lo, float)
    eta = np.asarray(x, float) @ params.beta
    u = rng.uniform(size=np.broadcast_shapes(t_lo.shape, np.shape(eta)))
    return invert_survival(t_lo, eta, params.shape_a, params.scale_b, horizon_age, u)


def invert_survival(t_lo, eta, a, b, horizon_age, u):
    """Deterministic core of :func:`sample_interval_survival` given uniforms
    ``u`` in (0, 1)."""
    lam_lo = np.exp(a * (np.log(t_lo) - np.log(b)))
    with np.errstate(over="ignore"):
        target = lam_lo - np.log1p(-u) * np.exp(-eta)
    t = b * target ** (1.0 / a)
    horizon_age = np.broadcast_to(np.asarray(horizon_age, float), np.shape(t))
    # guard against t rounding to t_lo when the hazard is huge
    t = np.maximum(t, np.nextafter(t_lo, np.inf))
    event = t <= horizon_age
    return np.where(event, t, horizon_age), event.astype(np.int8)
