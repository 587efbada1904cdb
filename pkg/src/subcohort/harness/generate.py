"""Synthetic cohorts: uniform baseline ages, covariate chains and
piecewise Weibull PH survival with administrative censoring."""

from __future__ import annotations

import numpy as np

from ..cohort import BINARY, DAYS_PER_YEAR, Cohort, CovariatePanel, SurvivalHistory
from ..covariates import QUADRATIC
from ..weibull import invert_survival
from .config import ExperimentConfig


def _true_eta(config: ExperimentConfig, x: np.ndarray) -> np.ndarray:
    eta = np.zeros(x.shape[0])
    for h, c in enumerate(config.covariates):
        v = x[:, h] - c.center
        eta += c.beta * v
        if c.feature == QUADRATIC:
            eta += c.beta_squared * v * v
    return eta


def generate_cohort(config: ExperimentConfig, seed) -> Cohort:
    """Simulate one complete cohort (all covariates of the living
    measured at every wave)."""
    rng = np.random.default_rng(seed)
    N, H = config.size, len(config.covariates)
    schedule = config.measurement_schedule
    M = schedule.M
    base_age = rng.uniform(config.age_min, config.age_max, size=N) * DAYS_PER_YEAR
    A = schedule.wave_ages(base_age)
    values = np.full((N, M + 1, H), np.nan)
    exit_age = A[:, M + 1].copy()
    event = np.zeros(N, np.int8)
    alive = np.arange(N)
    for m in range(M + 1):
        n = alive.size
        if n == 0:
            break
        x = np.empty((n, H))
        for h, c in enumerate(config.covariates):
            if c.kind == BINARY:
                if m == 0:
                    p = np.full(n, c.baseline_prob)
                else:
                    prev = values[alive, m - 1, h]
                    p = np.where(prev == 1, 1 - c.p_one_to_zero, c.p_zero_to_one)
                x[:, h] = (rng.uniform(size=n) < p).astype(float)
            elif m == 0:
                x[:, h] = c.baseline_mean + c.baseline_sd * rng.standard_normal(n)
            else:
                prev = values[alive, m - 1, h]
                x[:, h] = c.c + c.gamma * prev + np.sqrt(c.variance) * rng.standard_normal(n)
        values[alive, m, :] = x
        t, d = invert_survival(A[alive, m], _true_eta(config, x), config.shape, config.scale,
                               A[alive, m + 1], rng.uniform(size=n))
        died = d == 1
        exit_age[alive[died]] = t[died]
        event[alive[died]] = 1
        alive = alive[~died]
    panel = CovariatePanel.from_values(values, config.kinds, config.names)
    ids = tuple(str(j + 1) for j in range(N))
    return Cohort(ids, schedule, panel, SurvivalHistory(base_age, exit_age, event))
