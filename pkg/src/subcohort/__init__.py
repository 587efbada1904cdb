"""Sequential Bayesian D_beta-optimal subcohort selection for covariate
re-measurement in survival follow-up studies."""

from .cohort import (
    Cohort,
    CohortError,
    CohortSchema,
    CovariatePanel,
    Design,
    MeasurementSchedule,
    SurvivalHistory,
    apply_design,
    at_risk,
    load_cohort,
    load_design,
    save_cohort,
    save_design,
    truncate,
)
from .covariates import FeatureMap, ModelSpec, ProcessAssumption, TransitionAssumption
from .information import SingularInformationError, d_beta_value, observed_info
from .mcmc import ChainSettings, PosteriorSample, PriorSpec, run_chain
from .selection import SelectionSettings, greedy_select, run_wave, srs_select
from .weibull import SurvivalParams

__version__ = "0.1.0"
