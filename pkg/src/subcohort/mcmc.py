"""Posterior sampling with Bayesian data augmentation.

The chain targets

    survival likelihood x covariate-process likelihood x priors

over the survival parameters, the covariate-process parameters and every
covariate cell that is missing by design.  Layout of one sweep:

* single-site updates of missing cells, vectorized over individuals for a
  given (wave, covariate) since those cells are conditionally independent;
* adaptive random-walk Metropolis blocks for beta, the Weibull pair,
  each continuous process (c, gamma, log v) and baseline (mean, log var),
  and each binary process (d0, d1) and baseline logit.

The Weibull block runs in (log r, alpha') with alpha' = alpha + r log t_ref,
a shear of (log r, alpha) with unit Jacobian that removes most of their
posterior correlation.  Proposal scales adapt (Robbins-Monro on the
acceptance probability, empirical covariance) during burn-in only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, log_expit

from .cohort import BINARY, Cohort
from .covariates import ModelSpec, BinaryProcessParams, ContinuousProcessParams
from .weibull import SurvivalParams

log = logging.getLogger(__name__)


class ChainError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Variances are variances (not precisions).  The Gamma prior on the
    process error acts on the precision 1/v."""

    beta_var: float = 1e4
    r_shape: float = 1.0
    r_rate: float = 1e-4
    alpha_var: float = 1e4
    process_var: float = 100.0
    precision_shape: float = 1.0
    precision_rate: float = 0.01
    logit_var: float = 1e4

    def __post_init__(self):
        for name in ("beta_var", "r_shape", "r_rate", "alpha_var", "process_var",
                     "precision_shape", "precision_rate", "logit_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior hyperparameter {name} must be positive")


@dataclass(frozen=True)
class ChainSettings:
    iterations: int = 20000
    burn_in: int = 5000
    retained: int = 1000
    seed: int = 0
    target_accept: float = 0.35
    proposal_scales: Mapping[str, float] = field(default_factory=dict)
    fixed: Mapping[str, float] = field(default_factory=dict)
    optimize_init: bool = True

    @property
    def thin(self) -> int:
        return max(1, (self.iterations - self.burn_in) // self.retained)


# --------------------------------------------------------------------------
# posterior container


@dataclass(frozen=True)
class PosteriorSample:
    """Retained draws of every parameter plus imputed missing cells.

    ``values`` is (n_draws, n_params) on the natural scale with columns
    named by ``names``; ``cells`` lists missing cells as (j, wave, h) and
    ``imputed`` holds their raw values per draw.
    """

    names: tuple[str, ...]
    values: np.ndarray
    cells: np.ndarray
    imputed: np.ndarray
    feature_names: tuple[str, ...]
    covariate_names: tuple[str, ...]
    observed_values: np.ndarray
    meta: Mapping = field(default_factory=dict)

    def __len__(self) -> int:
        return self.values.shape[0]

    def param(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def beta(self) -> np.ndarray:
        return np.column_stack([self.param(f"beta:{f}") for f in self.feature_names])

    def survival_params(self, l: int) -> SurvivalParams:
        return SurvivalParams(self.beta()[l], self.param("a")[l], self.param("b")[l])

    def continuous_params(self, name: str, l: int) -> ContinuousProcessParams:
        return ContinuousProcessParams(self.param(f"c:{name}")[l], self.param(f"gamma:{name}")[l],
                                       self.param(f"v:{name}")[l])

    def binary_params(self, name: str, l: int) -> BinaryProcessParams:
        return BinaryProcessParams(self.param(f"d0:{name}")[l], self.param(f"d1:{name}")[l])

    def realization(self, l: int) -> np.ndarray:
        """Raw covariate values (N, K, H) with draw ``l``'s imputations."""
        x = np.array(self.observed_values)
        if len(self.cells):
            j, k, h = self.cells.T
            x[j, k, h] = self.imputed[l]
        return x

    def subsample(self, q: int, rng: np.random.Generator) -> "PosteriorSample":
        """``q`` draws chosen uniformly without replacement (order kept)."""
        if not 1 <= q <= len(self):
            raise ValueError(f"need 1 <= q <= {len(self)} draws, got {q}")
        idx = np.sort(rng.choice(len(self), size=q, replace=False))
        return self.take(idx)

    def take(self, idx) -> "PosteriorSample":
        idx = np.asarray(idx, int)
        return PosteriorSample(self.names, self.values[idx], self.cells, self.imputed[idx],
                               self.feature_names, self.covariate_names, self.observed_values,
                               dict(self.meta, subsample=idx.tolist()))

    def to_csv(self, path, include_imputed: bool = False, ids: Sequence[str] | None = None) -> None:
        header = list(self.names)
        if include_imputed:
            for j, k, h in self.cells:
                who = ids[j] if ids is not None else str(j)
                header.append(f"imp:{who}:{self.covariate_names[h]}:w{k}")
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for l in range(len(self)):
                row = [repr(float(v)) for v in self.values[l]]
                if include_imputed:
                    row += [repr(float(v)) for v in self.imputed[l]]
                w.writerow(row)


def read_posterior_csv(path, cohort: Cohort, feature_names: Sequence[str]) -> PosteriorSample:
    """Rebuild a :class:`PosteriorSample` from a draws CSV written with
    imputed cells, against the cohort it was fitted to."""
    index = {rid: j for j, rid in enumerate(cohort.ids)}
    covs = list(cohort.panel.names)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty draws file")
    header, body = rows[0], rows[1:]
    data = np.array([[float(c) for c in r] for r in body], float).reshape(len(body), len(header))
    pnames, cells, cols = [], [], []
    for i, h in enumerate(header):
        if h.startswith("imp:"):
            parts = h.split(":")
            rid, cov, wave = ":".join(parts[1:-2]), parts[-2], parts[-1]
            cells.append((index[rid], int(wave[1:]), covs.index(cov)))
            cols.append(i)
        else:
            pnames.append(h)
    pcols = [i for i, h in enumerate(header) if not h.startswith("imp:")]
    K = cohort.followed_to
    obs = np.where(cohort.observed_mask(), cohort.panel.values[:, :K, :], np.nan)
    missing = cohort.missing_cells()
    cells_arr = np.array(cells, int).reshape(-1, 3)
    got = np.zeros_like(missing)
    if len(cells_arr):
        got[tuple(cells_arr.T)] = True
    if not np.array_equal(got, missing):
        raise ValueError(f"{path}: imputed cells do not match the cohort's missing cells")
    return PosteriorSample(tuple(pnames), data[:, pcols], cells_arr, data[:, cols],
                           tuple(feature_names), tuple(covs), obs, {"source": str(path)})


def posterior_summary(sample: PosteriorSample, selector: str | Iterable[str] = "beta",
                      quantiles: Sequence[float] = (0.025, 0.5, 0.975)) -> dict:
    """Mean, sd and quantiles per selected parameter.  A string selector is
    a prefix ("beta" picks every ``beta:*`` column)."""
    if len(sample) == 0:
        raise ValueError("empty posterior sample")
    if isinstance(selector, str):
        names = [n for n in sample.names if n == selector or n.split(":")[0] == selector]
        if not names:
            raise KeyError(selector)
    else:
        names = list(selector)
    out = {}
    for n in names:
        x = sample.param(n)
        sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
        out[n] = {"mean": float(x.mean()), "sd": sd,
                  "quantiles": {float(q): float(np.quantile(x, q)) for q in quantiles}}
    return out


def effective_sample_size(chain, parameter: str | None = None) -> float:
    """Geyer's initial positive sequence estimator.  A constant chain has
    ESS 1 by convention."""
    if isinstance(chain, PosteriorSample):
        if parameter is None:
            raise ValueError("parameter name required")
        chain = chain.param(parameter)
    x = np.asarray(chain, float)
    n = x.size
    if n < 10:
        raise ValueError("chain too short for an ESS estimate")
    x = x - x.mean()
    var = np.dot(x, x) / n
    if var == 0:
        return 1.0
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    rho = acov / acov[0]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(n / max(tau, 1e-12)) if tau > 0 else float(n)


# --------------------------------------------------------------------------
# sampler


class _RWBlock:
    def __init__(self, name, x0, logp, free, cov0, target, scale0=1.0):
        self.name = name
        self.x = np.array(x0, float)
        self.logp = logp
        self.free = np.asarray(free, bool)
        self.d = int(self.free.sum())
        self.target = target
        self.log_scale = np.log(2.38 / np.sqrt(max(self.d, 1)) * scale0)
        self._set_cov(cov0)
        self.n_prop = 0
        self.n_acc = 0
        self._mean = np.zeros(self.d)
        self._m2 = np.zeros((self.d, self.d))
        self._count = 0

    def _set_cov(self, cov):
        cov = np.atleast_2d(np.asarray(cov, float))
        try:
            self.chol = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)) * max(1.0, np.trace(cov)))
        except np.linalg.LinAlgError:
            self.chol = np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-8)))

    def step(self, rng, adapt_t: int | None):
        if self.d == 0:
            return
        cur = self.logp(self.x)
        prop = self.x.copy()
        prop[self.free] += np.exp(self.log_scale) * (self.chol @ rng.standard_normal(self.d))
        new = self.logp(prop)
        log_a = new - cur if np.isfinite(new) else -np.inf
        accept = np.log(rng.uniform()) < log_a
        if accept:
            self.x = prop
        if adapt_t is None:
            self.n_prop += 1
            self.n_acc += int(accept)
            return
        a = float(np.exp(min(0.0, log_a))) if np.isfinite(log_a) else 0.0
        self.log_scale += (a - self.target) / (adapt_t + 1) ** 0.6
        self._count += 1
        z = self.x[self.free]
        delta = z - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, z - self._mean)
        if self._count >= 200 and self._count % 100 == 0:
            emp = self._m2 / (self._count - 1)
            if np.all(np.isfinite(emp)) and np.all(np.diag(emp) > 0):
                self._set_cov(emp)

    @property
    def acceptance(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else float("nan")


def _fd_hessian(f, x, free):
    """Central-difference Hessian of f over the free coordinates."""
    idx = np.flatnonzero(free)
    d = len(idx)
    h = 1e-4 * np.maximum(1.0, np.abs(x[idx]))
    H = np.zeros((d, d))
    f0 = f(x)
    for a in range(d):
        for b in range(a, d):
            def at(sa, sb):
                y = x.copy()
                y[idx[a]] += sa * h[a]
                y[idx[b]] += sb * h[b]
                return f(y)
            if a == b:
                H[a, a] = (at(1, 0) - 2 * f0 + at(-1, 0)) / h[a] ** 2
            else:
                H[a, b] = H[b, a] = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h[a] * h[b])
    return H


def _laplace_cov(f, x, free, fallback=1e-2):
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return np.zeros((0, 0))
    with np.errstate(all="ignore"):
        H = _fd_hessian(f, x, free)
    try:
        if not np.all(np.isfinite(H)):
            raise np.linalg.LinAlgError
        cov = np.linalg.inv(-H)
        np.linalg.cholesky(cov)
        return cov
    except np.linalg.LinAlgError:
        return np.eye(idx.size) * fallback


def _weibull_mom(ages) -> tuple[float, float]:
    """Crude method-of-moments Weibull fit (shape, scale)."""
    from scipy.special import gamma as G

    ages = np.asarray(ages, float)
    if ages.size < 2 or ages.std() == 0:
        return 1.0, float(ages.mean()) if ages.size else 1.0
    cv2 = ages.var() / ages.mean() ** 2

    def gap(a):
        return G(1 + 2 / a) / G(1 + 1 / a) ** 2 - 1 - cv2

    try:
        a = optimize.brentq(gap, 0.05, 100.0)
    except ValueError:
        a = 1.0
    return a, float(ages.mean() / G(1 + 1 / a))


class AugmentedChain:
    """State of one Metropolis-within-Gibbs chain.  Build with
    :func:`run_chain`; exposed for single-step tests."""

    def __init__(self, cohort: Cohort, model: ModelSpec, prior: PriorSpec, settings: ChainSettings):
        if tuple(model.names) != tuple(cohort.panel.names):
            raise ChainError("model covariates do not match the cohort panel")
        self.cohort, self.model, self.prior, self.settings = cohort, model, prior, settings
        self.rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
        self.fmap = model.feature_map
        self.kinds = cohort.panel.kinds
        self.K = K = cohort.followed_to
        self.N = N = cohort.N
        self.H = cohort.H
        self.P = self.fmap.P
        self.offsets = np.array(cohort.panel.centering_offsets)

        rec = cohort.records
        self.act = rec.active
        self.delta = rec.delta.astype(float)
        with np.errstate(divide="ignore"):
            log_hi = np.log(rec.t_hi)
            log_lo = np.log(rec.t_lo)
        self.log_tref = float(log_hi[self.act].mean()) if self.act.any() else 0.0
        self.s_hi = np.where(self.act, log_hi - self.log_tref, 0.0)
        self.s_lo = np.where(self.act, log_lo - self.log_tref, 0.0)
        self.log_hi = np.where(self.act, log_hi, 0.0)
        self.n_events = float(self.delta.sum())
        self.sum_delta_shi = float((self.delta * self.s_hi).sum())
        self.sum_delta_loghi = float((self.delta * self.log_hi).sum())

        self.observed = cohort.observed_mask()
        self.missing = cohort.missing_cells()
        obs_any = self.observed.any(axis=(0, 1)) if N else np.zeros(self.H, bool)
        if N and not obs_any.any():
            raise ChainError("no observed covariate values")
        self.x = np.where(self.observed, cohort.panel.values[:, :K, :], np.nan)
        self.observed_values = self.x.copy()

        self._groups = []
        for k in range(K):
            for h in range(self.H):
                J = np.flatnonzero(self.missing[:, k, h])
                if J.size:
                    nxt = self.act[J, k + 1] if k + 1 < K else np.zeros(J.size, bool)
                    self._groups.append((k, h, J, nxt))
        cells = np.argwhere(self.missing)
        self.cells = cells[np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))] if len(cells) else cells.reshape(0, 3)
        self.group_acc = {}

        self._init_state()

    # ---- parameter blocks -------------------------------------------------

    def _block_names(self):
        names = [f"beta:{f}" for f in self.fmap.feature_names] + ["a", "b", "r", "alpha"]
        for n, kind in zip(self.model.names, self.kinds):
            if kind == BINARY:
                names += [f"d0:{n}", f"d1:{n}", f"p0:{n}"]
            else:
                names += [f"c:{n}", f"gamma:{n}", f"v:{n}", f"mu0:{n}", f"v0:{n}"]
        return names

    def _init_state(self):
        p, rng = self.prior, self.rng
        fixed = dict(self.settings.fixed)
        known = set(self._block_names())
        unknown = set(fixed) - known
        if unknown:
            raise ChainError(f"cannot fix unknown parameters {sorted(unknown)}")
        if {"a", "b", "r", "alpha"} & set(fixed):
            raise ChainError("survival shape/scale cannot be fixed")

        self.proc = {}
        for h, (n, kind) in enumerate(zip(self.model.names, self.kinds)):
            xc = self.x[..., h] - self.offsets[h]
            pair = self.observed[:, 1:, h] & self.observed[:, :-1, h] if self.K > 1 else np.zeros((self.N, 0), bool)
            base = xc[:, 0][self.observed[:, 0, h]] if self.N else np.array([])
            if kind == BINARY:
                raw = self.x[..., h]
                prev, nxt = raw[:, :-1][pair], raw[:, 1:][pair]
                if prev.size:
                    p1 = [(nxt[prev == s].sum() + 0.5) / ((prev == s).sum() + 1.0) for s in (0, 1)]
                    d0 = np.log(p1[0] / (1 - p1[0]))
                    d1 = np.log(p1[1] / (1 - p1[1])) - d0
                elif n in self.model.assumptions:
                    bp = BinaryProcessParams.from_transitions(self.model.assumptions[n].p_one_to_zero,
                                                              self.model.assumptions[n].p_zero_to_one)
                    d0, d1 = bp.d0, bp.d1
                else:
                    d0 = d1 = 0.0
                rb = raw[:, 0][self.observed[:, 0, h]] if self.N else np.array([])
                pb = (rb.sum() + 0.5) / (rb.size + 1.0)
                self.proc[n] = {"logit": np.array([d0, d1]), "base": np.array([np.log(pb / (1 - pb))])}
            else:
                prev, nxt = xc[:, :-1][pair], xc[:, 1:][pair]
                if prev.size >= 3 and prev.var() > 0:
                    g, c = np.polyfit(prev, nxt, 1)
                    v = max(np.var(nxt - c - g * prev), 1e-6)
                else:
                    c, g = 0.0, 0.0
                    v = float(base.var()) if base.size > 1 and base.var() > 0 else 1.0
                m0 = float(base.mean()) if base.size else 0.0
                v0 = float(base.var()) if base.size > 1 and base.var() > 0 else 1.0
                self.proc[n] = {"ar": np.array([c, g, np.log(v)]), "base": np.array([m0, np.log(v0)])}
            for key, (blk, pos, tf) in {f"c:{n}": ("ar", 0, None), f"gamma:{n}": ("ar", 1, None),
                                        f"v:{n}": ("ar", 2, np.log), f"mu0:{n}": ("base", 0, None),
                                        f"v0:{n}": ("base", 1, np.log), f"d0:{n}": ("logit", 0, None),
                                        f"d1:{n}": ("logit", 1, None),
                                        f"p0:{n}": ("base", 0, lambda q: np.log(q / (1 - q)))}.items():
                if key in fixed:
                    val = fixed[key]
                    self.proc[n][blk][pos] = tf(val) if tf else val

        # impute missing cells by forward simulation, wave by wave
        for k, h, J, _ in self._groups:
            self._impute_forward(k, h, J)
        self.xc = self.x - self.offsets
        self.F = np.where(self.act[..., None], self.fmap.expand(np.nan_to_num(self.xc)), 0.0)

        # survival parameters
        events = self.cohort.records.t_hi[(self.delta == 1)]
        if self.act.any() and events.size >= 2:
            a0, b0 = _weibull_mom(events)
            lr, al = np.log(a0), -a0 * np.log(b0)
        elif self.act.any():
            lr, al = 0.0, -self.log_tref
        else:
            lr, al = np.log(p.r_shape / p.r_rate), 0.0
        beta0 = np.zeros(self.P)
        for k, v in fixed.items():
            if k.startswith("beta:"):
                beta0[self.fmap.feature_names.index(k[5:])] = v
        wb0 = np.array([lr, al + np.exp(lr) * self.log_tref])
        beta_free = np.array([f"beta:{f}" not in fixed for f in self.fmap.feature_names])

        if self.settings.optimize_init and self.act.any():
            x0 = np.concatenate([beta0, wb0])
            free = np.concatenate([beta_free, [True, True]])

            def negjoint(z):
                full = x0.copy()
                full[free] = z
                with np.errstate(all="ignore"):
                    v = self._logp_beta(full[: self.P], full[self.P:]) + self._logprior_wb(full[self.P:])
                return -v if np.isfinite(v) else 1e300

            res = optimize.minimize(negjoint, x0[free], method="L-BFGS-B")
            if np.all(np.isfinite(res.x)) and res.fun < negjoint(x0[free]):
                x0[free] = res.x
            beta0, wb0 = x0[: self.P], x0[self.P:]
        self._set_weibull(wb0)
        self.eta = self.F @ beta0
        self.expeta = np.exp(self.eta)

        scales = self.settings.proposal_scales
        tgt = self.settings.target_accept
        cov = _laplace_cov(lambda b: self._logp_beta(b, self.wb), beta0, beta_free, fallback=1e-2)
        self.beta_block = _RWBlock("beta", beta0, self._logp_beta_current, beta_free, cov, tgt,
                                   scales.get("beta", 1.0))
        cov = _laplace_cov(self._logp_wb, wb0, np.array([True, True]))
        self.wb_block = _RWBlock("weibull", wb0, self._logp_wb, np.array([True, True]), cov, tgt,
                                 scales.get("weibull", 1.0))
        self._update_suffstats()
        self.proc_blocks = []
        for h, (n, kind) in enumerate(zip(self.model.names, self.kinds)):
            if kind == BINARY:
                specs = [("logit", self._lp_logit(n), [f"d0:{n}", f"d1:{n}"]),
                         ("base", self._lp_base_binary(n), [f"p0:{n}"])]
            else:
                specs = [("ar", self._lp_ar(n), [f"c:{n}", f"gamma:{n}", f"v:{n}"]),
                         ("base", self._lp_base_cont(n), [f"mu0:{n}", f"v0:{n}"])]
            for blk, fn, keys in specs:
                free = np.array([k not in fixed for k in keys])
                x0 = self.proc[n][blk]
                cov = _laplace_cov(fn, x0, free, fallback=1e-2)
                b = _RWBlock(f"{blk}:{n}", x0, fn, free, cov, tgt, scales.get(f"{blk}:{n}", 1.0))
                self.proc_blocks.append((n, blk, b))

    def _impute_forward(self, k, h, J):
        n, kind = self.model.names[h], self.kinds[h]
        rng = self.rng
        if kind == BINARY:
            par = self.proc[n]
            if k == 0:
                p1 = expit(par["base"][0]) * np.ones(J.size)
            else:
                prev = self.x[J, k - 1, h]
                p1 = expit(par["logit"][0] + par["logit"][1] * prev)
            self.x[J, k, h] = (rng.uniform(size=J.size) < p1).astype(float)
        else:
            par = self.proc[n]
            if k == 0:
                mu, v = par["base"][0], np.exp(par["base"][1])
                vals = mu + np.sqrt(v) * rng.standard_normal(J.size)
            else:
                c, g, lv = par["ar"]
                prev = self.x[J, k - 1, h] - self.offsets[h]
                vals = c + g * prev + np.exp(lv / 2) * rng.standard_normal(J.size)
            self.x[J, k, h] = vals + self.offsets[h]

    # ---- log densities --------------------------------------------------

    def _logprior_beta(self, beta):
        return -0.5 * float(beta @ beta) / self.prior.beta_var

    def _logprior_wb(self, wb):
        p = self.prior
        lr, alpha_s = wb
        r = np.exp(lr)
        alpha = alpha_s - r * self.log_tref
        return p.r_shape * lr - p.r_rate * r - 0.5 * alpha**2 / p.alpha_var

    def _weibull_terms(self, wb):
        lr, alpha_s = wb
        r = np.exp(lr)
        with np.errstate(over="ignore", invalid="ignore"):
            L_hi = np.exp(r * self.s_hi + alpha_s)
            L_lo = np.exp(r * self.s_lo + alpha_s)
            D = np.where(self.act, L_hi - L_lo, 0.0)
        return D

    def _set_weibull(self, wb):
        self.wb = np.array(wb, float)
        self.D = self._weibull_terms(self.wb)

    def _logp_beta(self, beta, wb):
        D = self._weibull_terms(wb)
        eta = self.F @ beta
        lr, alpha_s = wb
        r = np.exp(lr)
        with np.errstate(over="ignore", invalid="ignore"):
            ll = (self.n_events * (lr + alpha_s) + r * self.sum_delta_shi - self.sum_delta_loghi
                  + float((self.delta * eta).sum()) - float((np.exp(eta) * D).sum()))
        return ll + self._logprior_beta(beta)

    def _logp_beta_current(self, beta):
        eta = self.F @ beta
        with np.errstate(over="ignore", invalid="ignore"):
            ll = float((self.delta * eta).sum()) - float((np.exp(eta) * self.D).sum())
        return ll + self._logprior_beta(beta) if np.isfinite(ll) else -np.inf

    def _logp_wb(self, wb):
        lr, alpha_s = wb
        r = np.exp(lr)
        D = self._weibull_terms(wb)
        with np.errstate(over="ignore", invalid="ignore"):
            ll = (self.n_events * (lr + alpha_s) + r * self.sum_delta_shi - self.sum_delta_loghi
                  - float((self.expeta * D).sum()))
        return ll + self._logprior_wb(wb) if np.isfinite(ll) else -np.inf

    def _update_suffstats(self):
        self.stats = {}
        K = self.K
        pair = self.act[:, 1:] if K > 1 else np.zeros((self.N, 0), bool)
        base = self.act[:, 0] if K else np.zeros(self.N, bool)
        for h, (n, kind) in enumerate(zip(self.model.names, self.kinds)):
            if kind == BINARY:
                raw = self.x[..., h]
                prev, nxt = raw[:, :-1][pair], raw[:, 1:][pair]
                n_ps = np.array([[np.sum((prev == s) & (nxt == t)) for t in (0, 1)] for s in (0, 1)], float)
                b = raw[:, 0][base]
                self.stats[n] = {"trans": n_ps, "base": (float(b.size - b.sum()), float(b.sum()))}
            else:
                xc = self.xc[..., h]
                prev, nxt = xc[:, :-1][pair], xc[:, 1:][pair]
                b = xc[:, 0][base]
                self.stats[n] = {
                    "ar": (prev.size, prev.sum(), nxt.sum(), prev @ prev, prev @ nxt, nxt @ nxt),
                    "base": (b.size, b.sum(), b @ b),
                }

    def _lp_precision(self, logv):
        p = self.prior
        tau = np.exp(-logv)
        return (p.precision_shape - 1) * np.log(tau) - p.precision_rate * tau + np.log(tau)

    def _lp_ar(self, n):
        def lp(z):
            c, g, lv = z
            cnt, sp, sn, spp, spn, snn = self.stats[n]["ar"]
            sse = snn - 2 * c * sn - 2 * g * spn + cnt * c * c + 2 * c * g * sp + g * g * spp
            v = np.exp(lv)
            return (-0.5 * cnt * (np.log(2 * np.pi) + lv) - 0.5 * sse / v
                    - 0.5 * (c * c + g * g) / self.prior.process_var + self._lp_precision(lv))
        return lp

    def _lp_base_cont(self, n):
        def lp(z):
            m, lv = z
            cnt, s, ss = self.stats[n]["base"]
            sse = ss - 2 * m * s + cnt * m * m
            return (-0.5 * cnt * (np.log(2 * np.pi) + lv) - 0.5 * sse / np.exp(lv)
                    - 0.5 * m * m / self.prior.process_var + self._lp_precision(lv))
        return lp

    def _lp_logit(self, n):
        def lp(z):
            d0, d1 = z
            t = self.stats[n]["trans"]
            out = 0.0
            for s in (0, 1):
                eta = d0 + d1 * s
                out += t[s, 1] * log_expit(eta) + t[s, 0] * log_expit(-eta)
            return out - 0.5 * (d0 * d0 + d1 * d1) / self.prior.logit_var
        return lp

    def _lp_base_binary(self, n):
        def lp(z):
            n0, n1 = self.stats[n]["base"]
            return n1 * log_expit(z[0]) + n0 * log_expit(-z[0]) - 0.5 * z[0] ** 2 / self.prior.logit_var
        return lp

    # ---- missing cells ----------------------------------------------------

    def _cell_proposal(self, k, h, J, has_next):
        """Draw from the covariate-process conditional of cell (k, h) given
        its neighbours in the chain (prior x forward term)."""
        n, kind = self.model.names[h], self.kinds[h]
        rng = self.rng
        if kind == BINARY:
            d0, d1 = self.proc[n]["logit"]
            if k == 0:
                z = np.full(J.size, self.proc[n]["base"][0])
            else:
                z = d0 + d1 * self.x[J, k - 1, h]
            lp1, lp0 = log_expit(z), log_expit(-z)
            if has_next.any():
                nx = np.where(has_next, self.x[J, np.minimum(k + 1, self.K - 1), h], 0.0)
                fwd = [np.where(nx == 1, log_expit(d0 + d1 * s), log_expit(-(d0 + d1 * s))) for s in (0, 1)]
                lp0 = lp0 + np.where(has_next, fwd[0], 0.0)
                lp1 = lp1 + np.where(has_next, fwd[1], 0.0)
            p1 = expit(lp1 - lp0)
            return (rng.uniform(size=J.size) < p1).astype(float)
        if k == 0:
            mu0, lv0 = self.proc[n]["base"]
            mean_p, var_p = np.full(J.size, mu0), np.exp(lv0)
        else:
            c, g, lv = self.proc[n]["ar"]
            mean_p, var_p = c + g * self.xc[J, k - 1, h], np.exp(lv)
        prec = np.full(J.size, 1.0 / var_p)
        num = mean_p / var_p
        if has_next.any():
            c, g, lv = self.proc[n]["ar"]
            v = np.exp(lv)
            nx = np.where(has_next, self.xc[J, np.minimum(k + 1, self.K - 1), h], 0.0)
            prec = prec + has_next * g * g / v
            num = num + has_next * g * (nx - c) / v
        mean = num / prec
        return mean + rng.standard_normal(J.size) / np.sqrt(prec) + self.offsets[h]

    def _update_group(self, k, h, J, has_next):
        new_raw = self._cell_proposal(k, h, J, has_next)
        row = self.xc[J, k, :].copy()
        row[:, h] = new_raw - self.offsets[h]
        F_new = self.fmap.expand(row)
        eta_new = F_new @ self.beta_block.x
        with np.errstate(over="ignore", invalid="ignore"):
            dll = self.delta[J, k] * (eta_new - self.eta[J, k]) - (np.exp(eta_new) - self.expeta[J, k]) * self.D[J, k]
        acc = np.log(self.rng.uniform(size=J.size)) < np.nan_to_num(dll, nan=-np.inf)
        Ja = J[acc]
        self.x[Ja, k, h] = new_raw[acc]
        self.xc[Ja, k, h] = row[acc, h]
        self.F[Ja, k, :] = F_new[acc]
        self.eta[Ja, k] = eta_new[acc]
        self.expeta[Ja, k] = np.exp(eta_new[acc])
        return acc

    def update_missing_cell(self, cell) -> bool:
        """Metropolis update of one missing cell (j, wave, h)."""
        j, k, h = (int(c) for c in cell)
        if not self.missing[j, k, h]:
            raise ValueError(f"cell {cell} is not missing")
        J = np.array([j])
        has_next = self.act[J, k + 1] if k + 1 < self.K else np.zeros(1, bool)
        acc = self._update_group(k, h, J, has_next)
        self._update_suffstats()
        return bool(acc[0])

    # ---- sweep -------------------------------------------------------------

    def sweep(self, adapt_t: int | None):
        for k, h, J, has_next in self._groups:
            acc = self._update_group(k, h, J, has_next)
            if adapt_t is None:
                tot = self.group_acc.setdefault((k, h), [0, 0])
                tot[0] += int(acc.sum())
                tot[1] += acc.size
        self.beta_block.step(self.rng, adapt_t)
        self.eta = self.F @ self.beta_block.x
        self.expeta = np.exp(self.eta)
        self.wb_block.step(self.rng, adapt_t)
        self._set_weibull(self.wb_block.x)
        self._update_suffstats()
        for n, blk, b in self.proc_blocks:
            b.step(self.rng, adapt_t)
            self.proc[n][blk] = b.x

    def current_values(self) -> np.ndarray:
        beta = self.beta_block.x
        lr, alpha_s = self.wb_block.x
        r = np.exp(lr)
        alpha = alpha_s - r * self.log_tref
        with np.errstate(over="ignore"):  # b overflows only for r near 0
            b = np.exp(-alpha / r)
        out = list(beta) + [r, b, r, alpha]
        for n, kind in zip(self.model.names, self.kinds):
            if kind == BINARY:
                d0, d1 = self.proc[n]["logit"]
                out += [d0, d1, expit(self.proc[n]["base"][0])]
            else:
                c, g, lv = self.proc[n]["ar"]
                m0, lv0 = self.proc[n]["base"]
                out += [c, g, np.exp(lv), m0, np.exp(lv0)]
        return np.array(out, float)

    def log_posterior(self) -> float:
        lp = self._logp_beta(self.beta_block.x, self.wb_block.x) + self._logprior_wb(self.wb_block.x)
        for n, blk, b in self.proc_blocks:
            lp += b.logp(b.x)
        return float(lp)


def run_chain(cohort: Cohort, model: ModelSpec, prior: PriorSpec | None = None,
              settings: ChainSettings | None = None) -> PosteriorSample:
    """Run one chain and return the retained draws."""
    prior = prior or PriorSpec()
    settings = settings or ChainSettings()
    if settings.iterations <= settings.burn_in:
        raise ChainError("iterations must exceed burn-in")
    if settings.retained < 1:
        raise ChainError("need at least one retained draw")
    chain = AugmentedChain(cohort, model, prior, settings)
    lp0 = chain.log_posterior()
    if not np.isfinite(lp0):
        raise ChainError("non-finite log-posterior at initialization")
    names = chain._block_names()
    thin = settings.thin
    keep = min(settings.retained, (settings.iterations - settings.burn_in) // thin)
    values = np.empty((keep, len(names)))
    imputed = np.empty((keep, len(chain.cells)))
    cj, ck, ch = chain.cells.T if len(chain.cells) else (np.array([], int),) * 3
    stored = 0
    for it in range(settings.iterations):
        burning = it < settings.burn_in
        chain.sweep(it if burning else None)
        if not burning and (it - settings.burn_in + 1) % thin == 0 and stored < keep:
            values[stored] = chain.current_values()
            imputed[stored] = chain.x[cj, ck, ch]
            stored += 1
    acc = {b.name: b.acceptance for b in [chain.beta_block, chain.wb_block] + [b for _, _, b in chain.proc_blocks]}
    for (k, h), (a, t) in chain.group_acc.items():
        acc[f"cells:w{k}:{cohort.panel.names[h]}"] = a / t if t else float("nan")
    meta = {
        "iterations": settings.iterations,
        "burn_in": settings.burn_in,
        "thin": thin,
        "seed": settings.seed,
        "acceptance": acc,
        "followed_to": cohort.followed_to,
        "fingerprint": cohort.fingerprint(),
        "log_tref": chain.log_tref,
    }
    return PosteriorSample(tuple(names), values, chain.cells, imputed, chain.fmap.feature_names,
                           tuple(cohort.panel.names), chain.observed_values, meta)
