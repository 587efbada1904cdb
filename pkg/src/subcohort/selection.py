"""Subcohort selection for a re-measurement wave: greedy Bayesian D_beta,
simple random sampling and the full cohort."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import Cohort, CohortError, Design, apply_design, at_risk, truncate
from .covariates import ModelSpec
from .information import SingularInformationError, WaveProblem, d_beta_batch
from .mcmc import PosteriorSample

log = logging.getLogger(__name__)

DBETA, SRS, FULL = "dbeta", "srs", "full"
STRATEGIES = (DBETA, SRS, FULL)


@dataclass(frozen=True)
class SelectionSettings:
    q: int = 25
    mc_reps: int = 100
    budget: int = 1
    seed: int = 0
    tie_tolerance: float = 1e-12
    drop_singular: bool = False

    def __post_init__(self):
        if self.q < 1 or self.budget < 1 or self.mc_reps < 1:
            raise ValueError("q, budget and mc_reps must be positive")
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance must be nonnegative")


@dataclass(frozen=True)
class SelectionResult:
    """Selected individuals (cohort row indices) in selection order."""

    order: np.ndarray
    ids: tuple[str, ...]
    criterion_trace: np.ndarray
    method: str
    wave: int
    ages: np.ndarray = field(default_factory=lambda: np.empty(0))
    previous: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    ties: int = 0
    dropped_draws: tuple[int, ...] = ()

    def to_csv(self, path, covariate_names) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "round", "criterion", "age"] + [f"prev_{n}" for n in covariate_names])
            for k, rid in enumerate(self.ids):
                crit = self.criterion_trace[k] if len(self.criterion_trace) else float("nan")
                w.writerow([rid, k + 1, repr(float(crit)), repr(float(self.ages[k]))]
                           + ["" if np.isnan(v) else repr(float(v)) for v in self.previous[k]])


def _result(cohort: Cohort, wave: int, order, trace, method, previous=None, ties=0, dropped=()) -> SelectionResult:
    order = np.asarray(order, int)
    ages = cohort.wave_ages[order, wave] if order.size else np.empty(0)
    if previous is None:
        prev_vals = cohort.panel.values[order, wave - 1, :] if order.size else np.empty((0, cohort.H))
    else:
        prev_vals = previous
    return SelectionResult(order, tuple(cohort.ids[i] for i in order), np.asarray(trace, float), method,
                           wave, ages, prev_vals, ties, tuple(dropped))


def greedy_from_problem(problem: WaveProblem, budget: int, rng: np.random.Generator,
                        tie_tolerance: float = 1e-12, drop_singular: bool = False):
    """Greedy search over a prepared :class:`WaveProblem`.

    Returns (positions into ``problem.candidates``, utility trace, number
    of ties broken at random, dropped draws).  A draw whose information
    matrix is not positive definite raises
    :class:`SingularInformationError`, or with ``drop_singular`` is removed
    from the average for the rest of the search.
    """
    C = problem.candidates.size
    remaining = np.arange(C)
    keep = np.arange(len(problem.observed))
    cur = problem.observed.copy()
    picks, trace, ties, dropped = [], [], 0, []
    step = 0
    while step < min(budget, C):
        psi = cur[keep][:, None] + problem.expected[keep][:, remaining]
        try:
            crit = d_beta_batch(psi, problem.H).mean(axis=0)
        except SingularInformationError as exc:
            l, c = exc.index
            if drop_singular and keep.size > 1:
                log.info("wave %d: dropping draw %d (singular information)", problem.wave, int(keep[l]))
                dropped.append(int(keep[l]))
                keep = np.delete(keep, l)
                continue
            raise SingularInformationError(
                f"singular information for draw {int(keep[l])}, candidate position {int(remaining[c])}") from None
        best = crit.min()
        tied = np.flatnonzero(crit <= best + tie_tolerance * abs(best))
        if tied.size > 1:
            ties += 1
            k = int(rng.choice(tied))
        else:
            k = int(tied[0])
        c = int(remaining[k])
        picks.append(c)
        trace.append(-float(crit[k]))
        cur += problem.expected[:, c]
        remaining = np.delete(remaining, k)
        step += 1
    if ties:
        log.info("wave %d: %d greedy steps broke ties at random", problem.wave, ties)
    return np.array(picks, int), np.array(trace), ties, tuple(dropped)


def greedy_select(cohort: Cohort, wave: int, posterior: PosteriorSample, model: ModelSpec,
                  settings: SelectionSettings) -> SelectionResult:
    """Greedy D_beta selection of ``settings.budget`` individuals.

    ``cohort`` must hold the data available before the wave (see
    :func:`subcohort.cohort.truncate`).  ``settings.q`` draws are taken
    uniformly from ``posterior``; Monte Carlo replicates are drawn once and
    kept fixed over the greedy steps.
    """
    if at_risk(cohort, wave).size == 0:
        raise CohortError(f"nobody at risk at wave {wave}")
    if len(posterior) < settings.q:
        raise ValueError(f"posterior has {len(posterior)} draws, q = {settings.q} needed")
    rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
    draws = posterior.subsample(settings.q, rng)
    problem = WaveProblem.build(cohort, wave, draws, model, settings.mc_reps, rng)
    picks, trace, ties, dropped = greedy_from_problem(problem, settings.budget, rng, settings.tie_tolerance,
                                                      settings.drop_singular)
    order = problem.candidates[picks]
    prev = np.mean([d.prev[picks] for d in problem.draws], axis=0) if picks.size else None
    return _result(cohort, wave, order, trace, DBETA, prev, ties, dropped)


def srs_select(cohort: Cohort, wave: int, budget: int, rng: np.random.Generator) -> SelectionResult:
    risk = at_risk(cohort, wave)
    n = min(budget, risk.size)
    order = rng.choice(risk, size=n, replace=False) if n else np.empty(0, int)
    return _result(cohort, wave, order, [], SRS)


def full_select(cohort: Cohort, wave: int) -> SelectionResult:
    return _result(cohort, wave, at_risk(cohort, wave), [], FULL)


@dataclass(frozen=True)
class WaveAudit:
    strategy: str
    wave: int
    budget: int | None
    seed: int
    q: int | None
    mc_reps: int | None
    data_fingerprint: str
    posterior_fingerprint: str | None
    result: SelectionResult


def observed_before(cohort: Cohort, design: Design, wave: int) -> Cohort:
    """The data available just before measuring ``wave`` under ``design``."""
    return apply_design(truncate(cohort, wave), design)


def run_wave(cohort: Cohort, design: Design, wave: int, strategy: str, settings: SelectionSettings,
             posterior: PosteriorSample | None = None, model: ModelSpec | None = None):
    """Fill column ``wave`` of ``design``.

    ``cohort`` may be complete; follow-up beyond tau_wave and unselected
    measurements are hidden before selecting.  Returns the updated design
    and a :class:`WaveAudit`.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not 1 <= wave <= cohort.schedule.M:
        raise CohortError(f"wave {wave} is not a re-measurement")
    seen = observed_before(cohort, design, wave)
    if strategy == DBETA:
        if posterior is None or model is None:
            raise ValueError("D_beta selection needs a posterior and a selection model")
        result = greedy_select(seen, wave, posterior, model, settings)
    elif strategy == SRS:
        result = srs_select(seen, wave, settings.budget, np.random.default_rng(np.random.SeedSequence(settings.seed)))
    else:
        result = full_select(seen, wave)
    budgets = list(design.column_budgets)
    budgets[wave] = None if strategy == FULL else settings.budget
    new = Design(design.with_column(wave, result.order).xi, tuple(budgets))
    audit = WaveAudit(strategy, wave, None if strategy == FULL else settings.budget, settings.seed,
                      settings.q if strategy == DBETA else None,
                      settings.mc_reps if strategy == DBETA else None, seen.fingerprint(),
                      posterior.meta.get("fingerprint") if posterior is not None else None, result)
    return new, audit
