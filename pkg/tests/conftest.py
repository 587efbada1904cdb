import numpy as np
import pytest

from subcohort.cohort import Cohort, CovariatePanel, MeasurementSchedule, SurvivalHistory, DAYS_PER_YEAR
from subcohort.harness.config import ExperimentConfig, MCMCConfig, SIMULATION_COVARIATES


def make_cohort(baseline_years, exit_years, event, values, kinds=None, names=None,
                schedule=(0.0, 10.0, 20.0), end=30.0):
    """Small hand-built cohort; ages in years, values (N, M+1, H)."""
    values = np.asarray(values, float)
    if values.ndim == 2:
        values = values[:, :, None]
    names = names or tuple(f"x{h}" for h in range(values.shape[2]))
    kinds = kinds or ("continuous",) * values.shape[2]
    sched = MeasurementSchedule(schedule, end)
    panel = CovariatePanel.from_values(values, kinds, names)
    surv = SurvivalHistory(np.asarray(baseline_years, float) * DAYS_PER_YEAR,
                           np.asarray(exit_years, float) * DAYS_PER_YEAR, np.asarray(event, int))
    return Cohort(tuple(str(i + 1) for i in range(len(values))), sched, panel, surv)


@pytest.fixture
def tiny_config():
    return ExperimentConfig(covariates=SIMULATION_COVARIATES, size=200, budgets=((40,),),
                            mcmc=MCMCConfig(iterations=800, burn_in=300, retained=100),
                            draws=5, mc_reps=20, replicates=2, seed=11)
