"""Experiment configuration.

Configs are INI files.  Sections and keys (defaults in brackets)::

    [cohort]      size [500], age_min [45], age_max [65] (years),
                  schedule [0, 10, 20] (years), follow_up_end [30]
    [survival]    shape [6.3], scale [27900] (days)
    [covariate:NAME]
        kind              continuous | binary
        feature           identity | quadratic         (analysis model)
        selection_feature defaults to ``feature``      (selection model)
        beta, beta_squared                             true coefficients
        continuous: baseline_mean [0], baseline_sd [1], gamma [0.5],
                    variance [0.75], intercept [(1 - gamma) * baseline_mean]
                    assumed_gamma [0.5], assumed_variance [(1 - gamma^2) *
                    baseline variance]  (used for selection before any
                    re-measurement exists)
        binary:     baseline_prob [0.5], p_one_to_zero, p_zero_to_one (truth),
                    assumed_p_one_to_zero [0.4], assumed_p_zero_to_one [0.1]
    [design]      strategies [dbeta, srs, full]; budgets [100, 150], each
                  either one count for every wave or counts per wave joined
                  by "/" (e.g. 100/120)
    [mcmc]        iterations, burn_in, retained, target_accept
    [selection]   draws (q) [25], mc_reps [100], tie_tolerance [1e-12],
                  singular_draws [drop]: drop draws whose information
                  matrix is not positive definite, or raise
    [experiment]  replicates [30], seed, workers [1]

The true hazard uses covariates centered at ``baseline_mean`` (continuous)
or raw 0/1 states (binary).
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..cohort import BINARY, CONTINUOUS, MeasurementSchedule
from ..covariates import IDENTITY, QUADRATIC, FeatureMap, ModelSpec, ProcessAssumption, TransitionAssumption
from ..mcmc import ChainSettings
from ..selection import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = CONTINUOUS
    feature: str = IDENTITY
    selection_feature: str | None = None
    beta: float = 0.0
    beta_squared: float = 0.0
    baseline_mean: float = 0.0
    baseline_sd: float = 1.0
    gamma: float = 0.5
    variance: float = 0.75
    intercept: float | None = None
    baseline_prob: float = 0.5
    p_one_to_zero: float = 0.4
    p_zero_to_one: float = 0.1
    assumed_p_one_to_zero: float = 0.4
    assumed_p_zero_to_one: float = 0.1
    assumed_gamma: float = 0.5
    assumed_variance: float | None = None

    @property
    def c(self) -> float:
        return (1 - self.gamma) * self.baseline_mean if self.intercept is None else self.intercept

    @property
    def center(self) -> float:
        return self.baseline_mean if self.kind == CONTINUOUS else 0.0


@dataclass(frozen=True)
class MCMCConfig:
    iterations: int = 20000
    burn_in: int = 5000
    retained: int = 1000
    target_accept: float = 0.35

    def settings(self, seed: int) -> ChainSettings:
        return ChainSettings(self.iterations, self.burn_in, self.retained, seed, self.target_accept)


@dataclass(frozen=True)
class ExperimentConfig:
    covariates: tuple[CovariateSpec, ...]
    size: int = 500
    age_min: float = 45.0
    age_max: float = 65.0
    schedule: tuple[float, ...] = (0.0, 10.0, 20.0)
    follow_up_end: float = 30.0
    shape: float = 6.3
    scale: float = 27900.0
    strategies: tuple[str, ...] = ("dbeta", "srs", "full")
    budgets: tuple[tuple[int, ...], ...] = ((100,), (150,))
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    draws: int = 25
    mc_reps: int = 100
    tie_tolerance: float = 1e-12
    singular_draws: str = "drop"
    replicates: int = 30
    seed: int = 2016
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.covariates:
            raise ConfigError("at least one covariate is required")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        for c in self.covariates:
            if c.kind not in (CONTINUOUS, BINARY):
                raise ConfigError(f"covariate {c.name}: unknown kind {c.kind!r}")
            for f in (c.feature, c.selection_feature or c.feature):
                if f not in (IDENTITY, QUADRATIC):
                    raise ConfigError(f"covariate {c.name}: unknown feature {f!r}")
            if c.kind == BINARY and QUADRATIC in (c.feature, c.selection_feature):
                raise ConfigError(f"covariate {c.name}: binary covariates cannot be quadratic")
        if self.size < 1 or self.replicates < 1 or self.workers < 1:
            raise ConfigError("size, replicates and workers must be positive")
        if not 0 < self.age_min < self.age_max:
            raise ConfigError("need 0 < age_min < age_max")
        try:
            self.measurement_schedule
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        M = len(self.schedule) - 1
        for b in self.budgets:
            if len(b) not in (1, M) or any(n < 1 for n in b):
                raise ConfigError(f"budget {b} must give one count or one per re-measurement")
            if max(b) > self.size:
                raise ConfigError(f"budget {b} exceeds the cohort size")
        if self.singular_draws not in ("drop", "raise"):
            raise ConfigError("singular_draws must be drop or raise")
        if self.draws < 1 or self.mc_reps < 1:
            raise ConfigError("draws and mc_reps must be positive")
        if self.mcmc.iterations <= self.mcmc.burn_in or self.mcmc.retained < self.draws:
            raise ConfigError("MCMC needs iterations > burn_in and retained >= draws")

    @property
    def measurement_schedule(self) -> MeasurementSchedule:
        return MeasurementSchedule(self.schedule, self.follow_up_end)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(c.kind for c in self.covariates)

    def budget_per_wave(self, budget: tuple[int, ...]) -> tuple[int, ...]:
        M = len(self.schedule) - 1
        return budget * M if len(budget) == 1 else budget

    def _model(self, attr: str) -> ModelSpec:
        rules = tuple((c.name, getattr(c, attr) or c.feature) for c in self.covariates)
        assumptions = {c.name: TransitionAssumption(c.assumed_p_one_to_zero, c.assumed_p_zero_to_one)
                       if c.kind == BINARY else ProcessAssumption(c.assumed_gamma, c.assumed_variance)
                       for c in self.covariates}
        return ModelSpec(FeatureMap(rules), self.kinds, assumptions)

    @property
    def analysis_model(self) -> ModelSpec:
        return self._model("feature")

    @property
    def selection_model(self) -> ModelSpec:
        return self._model("selection_feature")

    def true_beta(self) -> dict[str, float]:
        out = {}
        for c in self.covariates:
            out[c.name] = c.beta
            if c.feature == QUADRATIC:
                out[f"{c.name}^2"] = c.beta_squared
        return out

    def to_ini(self) -> str:
        """Every setting, defaults included, as INI text."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["cohort"] = {"size": str(self.size), "age_min": repr(self.age_min), "age_max": repr(self.age_max),
                        "schedule": ", ".join(repr(t) for t in self.schedule),
                        "follow_up_end": repr(self.follow_up_end)}
        cp["survival"] = {"shape": repr(self.shape), "scale": repr(self.scale)}
        for c in self.covariates:
            d = {k: ("" if v is None else repr(v) if isinstance(v, float) else str(v))
                 for k, v in asdict(c).items() if k != "name"}
            cp[f"covariate:{c.name}"] = d
        cp["design"] = {"strategies": ", ".join(self.strategies),
                        "budgets": ", ".join("/".join(str(n) for n in b) for b in self.budgets)}
        cp["mcmc"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self.mcmc).items()}
        cp["selection"] = {"draws": str(self.draws), "mc_reps": str(self.mc_reps),
                           "tie_tolerance": repr(self.tie_tolerance), "singular_draws": self.singular_draws}
        cp["experiment"] = {"replicates": str(self.replicates), "seed": str(self.seed),
                            "workers": str(self.workers)}
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_FLOAT_KEYS = {"beta", "beta_squared", "baseline_mean", "baseline_sd", "gamma", "variance", "intercept",
               "baseline_prob", "p_one_to_zero", "p_zero_to_one", "assumed_p_one_to_zero",
               "assumed_p_zero_to_one", "assumed_gamma", "assumed_variance"}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse INI text; keys not given fall back to ``base`` (or the
    built-in defaults)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    known = {"cohort", "survival", "design", "mcmc", "selection", "experiment"}
    for s in cp.sections():
        if s not in known and not s.startswith("covariate:"):
            raise ConfigError(f"unknown section [{s}]")
    kw = {}
    try:
        if cp.has_section("cohort"):
            sec = cp["cohort"]
            for k in sec:
                if k == "size":
                    kw["size"] = sec.getint(k)
                elif k in ("age_min", "age_max", "follow_up_end"):
                    kw[k] = sec.getfloat(k)
                elif k == "schedule":
                    kw["schedule"] = _floats(sec[k])
                else:
                    raise ConfigError(f"[cohort]: unknown key {k!r}")
        if cp.has_section("survival"):
            for k in cp["survival"]:
                if k not in ("shape", "scale"):
                    raise ConfigError(f"[survival]: unknown key {k!r}")
                kw[k] = cp["survival"].getfloat(k)
        covs = []
        for s in cp.sections():
            if not s.startswith("covariate:"):
                continue
            name = s.split(":", 1)[1].strip()
            ck = {}
            for k, v in cp[s].items():
                if k in _FLOAT_KEYS:
                    ck[k] = float(v) if v.strip() else None
                elif k in ("kind", "feature", "selection_feature"):
                    ck[k] = v.strip() or None
                else:
                    raise ConfigError(f"[{s}]: unknown key {k!r}")
            covs.append(CovariateSpec(name, **{k: v for k, v in ck.items() if v is not None or k in ("intercept", "assumed_variance")}))
        if covs:
            kw["covariates"] = tuple(covs)
        if cp.has_section("design"):
            sec = cp["design"]
            for k in sec:
                if k == "strategies":
                    kw["strategies"] = tuple(t.strip() for t in sec[k].split(",") if t.strip())
                elif k == "budgets":
                    kw["budgets"] = tuple(tuple(int(n) for n in t.split("/")) for t in sec[k].split(",") if t.strip())
                else:
                    raise ConfigError(f"[design]: unknown key {k!r}")
        base = base or desk_profile()
        mc = {}
        if cp.has_section("mcmc"):
            for k, v in cp["mcmc"].items():
                if k in ("iterations", "burn_in", "retained"):
                    mc[k] = int(v)
                elif k == "target_accept":
                    mc[k] = float(v)
                else:
                    raise ConfigError(f"[mcmc]: unknown key {k!r}")
            kw["mcmc"] = replace(base.mcmc, **mc)
        if cp.has_section("selection"):
            for k, v in cp["selection"].items():
                if k in ("draws", "mc_reps"):
                    kw[k] = int(v)
                elif k == "tie_tolerance":
                    kw[k] = float(v)
                elif k == "singular_draws":
                    kw[k] = v.strip()
                else:
                    raise ConfigError(f"[selection]: unknown key {k!r}")
        if cp.has_section("experiment"):
            for k, v in cp["experiment"].items():
                if k in ("replicates", "seed", "workers"):
                    kw[k] = int(v)
                else:
                    raise ConfigError(f"[experiment]: unknown key {k!r}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return replace(base, **kw)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


SIMULATION_COVARIATES = (
    CovariateSpec("x", beta=0.1, baseline_mean=0.0, baseline_sd=1.0, gamma=0.5, variance=0.75),
    CovariateSpec("z", beta=0.4, baseline_mean=0.0, baseline_sd=1.0, gamma=0.5, variance=0.75),
)


def desk_profile() -> ExperimentConfig:
    """Reduced-scale version of the two-covariate simulation design."""
    return ExperimentConfig(
        covariates=SIMULATION_COVARIATES,
        size=500,
        budgets=((100,), (150,)),
        mcmc=MCMCConfig(iterations=3000, burn_in=1000, retained=500),
        replicates=30,
    )


def paper_profile() -> ExperimentConfig:
    """Full-scale two-covariate simulation design (N = 1500, 100 replicates)."""
    return ExperimentConfig(
        covariates=SIMULATION_COVARIATES,
        size=1500,
        budgets=((300,), (400,), (500,), (600,)),
        mcmc=MCMCConfig(iterations=20000, burn_in=5000, retained=1000),
        replicates=100,
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}
