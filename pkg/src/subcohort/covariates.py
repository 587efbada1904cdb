"""Time-varying covariate processes and feature expansion.

Continuous covariates follow a first-order autoregression
x_m = c + gamma * x_{m-1} + eps, eps ~ N(0, v), on the centered scale.
Binary covariates follow a logistic transition model
P(x_m = 1 | x_{m-1}) = logistic(d0 + d1 * x_{m-1}) on raw 0/1 states.
Before any transitions have been observed, the selection step replaces
the fitted process by an assumption: :class:`TransitionAssumption` for
binary covariates and a stationary :class:`ProcessAssumption` for
continuous ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .cohort import BINARY, CONTINUOUS

IDENTITY = "identity"
QUADRATIC = "quadratic"


@dataclass(frozen=True)
class ContinuousProcessParams:
    c: float
    gamma: float
    v: float

    def __post_init__(self):
        if not self.v >= 0:
            raise ValueError("process variance must be nonnegative")


@dataclass(frozen=True)
class BinaryProcessParams:
    d0: float
    d1: float

    @classmethod
    def from_transitions(cls, p_one_to_zero: float, p_zero_to_one: float) -> "BinaryProcessParams":
        d0 = np.log(p_zero_to_one) - np.log1p(-p_zero_to_one)
        stay = 1.0 - p_one_to_zero
        return cls(d0, np.log(stay) - np.log1p(-stay) - d0)


@dataclass(frozen=True)
class TransitionAssumption:
    """Assumed transition probabilities used while no transition has been
    observed (defaults: a 1 becomes 0 w.p. 0.4, a 0 becomes 1 w.p. 0.1)."""

    p_one_to_zero: float = 0.4
    p_zero_to_one: float = 0.1

    def __post_init__(self):
        for p in (self.p_one_to_zero, self.p_zero_to_one):
            if not 0.0 <= p <= 1.0:
                raise ValueError("transition probabilities must lie in [0, 1]")

    def prob_one(self, prev):
        prev = np.asarray(prev)
        return np.where(prev == 1, 1.0 - self.p_one_to_zero, self.p_zero_to_one)


@dataclass(frozen=True)
class ProcessAssumption:
    """Assumed AR(1) for a continuous covariate while no transition has been
    observed: x_m = gamma * x_{m-1} + eps on the centered scale.  Unless
    ``variance`` is given, v = (1 - gamma^2) * (baseline variance), which
    keeps the marginal variance at its baseline value."""

    gamma: float = 0.5
    variance: float | None = None

    def __post_init__(self):
        if self.variance is None and not abs(self.gamma) < 1:
            raise ValueError("a stationary assumption needs |gamma| < 1 or an explicit variance")
        if self.variance is not None and not self.variance >= 0:
            raise ValueError("variance must be nonnegative")

    def params(self, baseline_variance: float) -> ContinuousProcessParams:
        v = self.variance if self.variance is not None else (1 - self.gamma**2) * baseline_variance
        return ContinuousProcessParams(0.0, self.gamma, float(v))


def simulate_next_continuous(prev, params: ContinuousProcessParams, rng: np.random.Generator):
    prev = np.asarray(prev, float)
    mean = params.c + params.gamma * prev
    if params.v == 0:
        return mean
    return mean + np.sqrt(params.v) * rng.standard_normal(prev.shape)


def simulate_next_binary(prev, params: BinaryProcessParams | TransitionAssumption, rng: np.random.Generator):
    prev = np.asarray(prev)
    if np.any((prev != 0) & (prev != 1)):
        raise ValueError("binary state must be 0 or 1")
    if isinstance(params, TransitionAssumption):
        p = params.prob_one(prev)
    else:
        p = expit(params.d0 + params.d1 * prev)
    return (rng.uniform(size=prev.shape) < p).astype(np.int8)


def logdensity_continuous(nxt, prev, params: ContinuousProcessParams):
    if not params.v > 0:
        raise ValueError("process variance must be positive")
    resid = np.asarray(nxt, float) - params.c - params.gamma * np.asarray(prev, float)
    return -0.5 * np.log(2 * np.pi * params.v) - 0.5 * resid**2 / params.v


def logmass_binary(nxt, prev, params: BinaryProcessParams | TransitionAssumption):
    nxt = np.asarray(nxt)
    if isinstance(params, TransitionAssumption):
        p = params.prob_one(prev)
        with np.errstate(divide="ignore"):
            return np.where(nxt == 1, np.log(p), np.log1p(-p))
    z = params.d0 + params.d1 * np.asarray(prev, float)
    return np.where(nxt == 1, log_expit(z), log_expit(-z))


@dataclass(frozen=True)
class FeatureMap:
    """Expansion rule per raw covariate; ``quadratic`` adds a squared
    column right after the linear one."""

    rules: tuple[tuple[str, str], ...]

    def __post_init__(self):
        rules = tuple((str(n), str(r)) for n, r in self.rules)
        for n, r in rules:
            if r not in (IDENTITY, QUADRATIC):
                raise ValueError(f"unknown feature rule {r!r} for {n!r}")
        object.__setattr__(self, "rules", rules)

    @classmethod
    def identity(cls, names: Sequence[str]) -> "FeatureMap":
        return cls(tuple((n, IDENTITY) for n in names))

    @classmethod
    def from_mapping(cls, names: Sequence[str], mapping: Mapping[str, str]) -> "FeatureMap":
        return cls(tuple((n, mapping.get(n, IDENTITY)) for n in names))

    @property
    def raw_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.rules)

    @property
    def feature_names(self) -> tuple[str, ...]:
        out = []
        for n, r in self.rules:
            out.append(n)
            if r == QUADRATIC:
                out.append(f"{n}^2")
        return tuple(out)

    @property
    def P(self) -> int:
        return len(self.feature_names)

    def columns_of(self, h: int) -> list[int]:
        """Feature columns derived from raw covariate ``h``."""
        pos = 0
        for k, (_, r) in enumerate(self.rules):
            width = 2 if r == QUADRATIC else 1
            if k == h:
                return list(range(pos, pos + width))
            pos += width
        raise IndexError(h)

    def expand(self, centered: np.ndarray) -> np.ndarray:
        """Map centered raw values (..., H_raw) to features (..., P).  NaN
        propagates to every derived column."""
        centered = np.asarray(centered, float)
        cols = []
        for h, (_, r) in enumerate(self.rules):
            col = centered[..., h]
            cols.append(col)
            if r == QUADRATIC:
                cols.append(col * col)
        return np.stack(cols, axis=-1)


def expand_features(raw, feature_map: FeatureMap, offsets=None) -> np.ndarray:
    """Center raw covariate values (NaN = missing) and expand them."""
    raw = np.asarray(raw, float)
    if offsets is not None:
        raw = raw - np.asarray(offsets, float)
    return feature_map.expand(raw)


@dataclass(frozen=True)
class ModelSpec:
    """Survival-model features plus the process assumptions used by the
    selection step before any transitions are observed (one per raw
    covariate name; continuous covariates without an entry get
    ``ProcessAssumption()``)."""

    feature_map: FeatureMap
    kinds: tuple[str, ...]
    assumptions: Mapping[str, TransitionAssumption | ProcessAssumption] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.kinds) != len(self.feature_map.rules):
            raise ValueError("one kind per raw covariate required")
        for k in self.kinds:
            if k not in (CONTINUOUS, BINARY):
                raise ValueError(f"unknown covariate kind {k!r}")

    @classmethod
    def for_panel(cls, panel, rules: Mapping[str, str] | None = None, assumptions=None) -> "ModelSpec":
        fmap = FeatureMap.from_mapping(panel.names, rules or {})
        if assumptions is None:
            assumptions = {n: TransitionAssumption() if k == BINARY else ProcessAssumption()
                           for n, k in zip(panel.names, panel.kinds)}
        return cls(fmap, tuple(panel.kinds), dict(assumptions))

    @property
    def names(self) -> tuple[str, ...]:
        return self.feature_map.raw_names

    def assumption(self, name: str):
        a = self.assumptions.get(name)
        if a is None and self.kinds[self.names.index(name)] == CONTINUOUS:
            return ProcessAssumption()
        return a
