"""Replicated design-comparison experiments.

Every replicate generates one cohort and runs every strategy on it
(paired comparison).  A run is a (strategy, budget) pair; within a run the
waves are processed in order: fit the selection model to the data seen so
far, select, measure.  The final analysis model is then fitted to the
completed design.

Raw artifacts written to the output directory:

``replicate_results.csv``  one row per (replicate, strategy, budget, parameter)
``selections.csv``         selection order of every run and wave
``designs.csv``            final design of every run
``failures.csv``           replicates or runs that raised
``metadata.json``          echoed config, seeds and package version

All are deterministic functions of (config, master seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..cohort import Cohort, Design, apply_design
from ..mcmc import PosteriorSample, PriorSpec, posterior_summary, run_chain
from ..selection import DBETA, FULL, SelectionSettings, observed_before, run_wave
from .config import ExperimentConfig
from .generate import generate_cohort
from .report import ResultTable, aggregate

log = logging.getLogger(__name__)

RESULT_FIELDS = ["replicate", "strategy", "budget", "parameter", "truth", "post_mean", "post_sd",
                 "q025", "q975", "covered"]
FAILURE_FIELDS = ["replicate", "strategy", "budget", "error", "message"]

# stream tags for seed derivation
_COHORT, _CHAIN, _SELECT = 0, 1, 2


def budget_label(budget: tuple[int, ...] | None) -> str:
    return "all" if budget is None else "/".join(str(n) for n in budget)


def _tag(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def derive_seed(master: int, *keys: int) -> int:
    """A 32-bit seed that depends only on the master seed and ``keys``."""
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


@dataclass
class RunOutput:
    strategy: str
    budget: str
    summary: dict
    design: Design
    selections: list = field(default_factory=list)


@dataclass
class ReplicateOutput:
    replicate: int
    ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    runs: list
    failures: list


def _runs(config: ExperimentConfig):
    for s in config.strategies:
        if s == FULL:
            yield s, None
        else:
            for b in config.budgets:
                yield s, b


def run_replicate(config: ExperimentConfig, replicate: int) -> ReplicateOutput:
    """Run every strategy on the replicate's cohort.  Failures of single
    runs are recorded and do not stop the others."""
    master = config.seed
    cohort = generate_cohort(config, derive_seed(master, replicate, _COHORT))
    prior = PriorSpec()
    cache: dict[str, PosteriorSample] = {}
    truth = config.true_beta()
    M = config.measurement_schedule.M
    runs, failures = [], []

    def fit(data: Cohort, model, tag: str) -> PosteriorSample:
        key = f"{tag}:{data.fingerprint()}"
        if key not in cache:
            seed = derive_seed(master, replicate, _CHAIN, _tag(key))
            cache[key] = run_chain(data, model, prior, config.mcmc.settings(seed))
        return cache[key]

    for strategy, budget in _runs(config):
        label = budget_label(budget)
        try:
            per_wave = (None,) * M if budget is None else config.budget_per_wave(budget)
            design = Design.baseline(cohort, (None,) + per_wave)
            selections = []
            for m in range(1, M + 1):
                settings = SelectionSettings(
                    q=config.draws, mc_reps=config.mc_reps, budget=per_wave[m - 1] or 1,
                    seed=derive_seed(master, replicate, _SELECT, _tag(f"{strategy}:{label}"), m),
                    tie_tolerance=config.tie_tolerance,
                    drop_singular=config.singular_draws == "drop")
                posterior = None
                if strategy == DBETA:
                    posterior = fit(observed_before(cohort, design, m), config.selection_model, "selection")
                design, audit = run_wave(cohort, design, m, strategy, settings, posterior,
                                         config.selection_model)
                if strategy != FULL:
                    selections.append(audit.result)
            final = fit(apply_design(cohort, design), config.analysis_model, "analysis")
            summ = posterior_summary(final, "beta")
            rows = {}
            for name, s in summ.items():
                feat = name.split(":", 1)[1]
                lo, hi = s["quantiles"][0.025], s["quantiles"][0.975]
                t = truth.get(feat, float("nan"))
                rows[feat] = dict(truth=t, post_mean=s["mean"], post_sd=s["sd"], q025=lo, q975=hi,
                                  covered=int(lo <= t <= hi))
            runs.append(RunOutput(strategy, label, rows, design, selections))
        except Exception as exc:  # recorded, surfaced in failures.csv and the table
            log.warning("replicate %d %s/%s failed: %s", replicate, strategy, label, exc)
            log.debug("%s", traceback.format_exc())
            failures.append(dict(replicate=replicate, strategy=strategy, budget=label,
                                 error=type(exc).__name__, message=str(exc)))
    return ReplicateOutput(replicate, cohort.ids, cohort.panel.names, runs, failures)


def _safe_replicate(config: ExperimentConfig, replicate: int) -> ReplicateOutput:
    try:
        return run_replicate(config, replicate)
    except Exception as exc:
        return ReplicateOutput(replicate, (), config.names, [],
                               [dict(replicate=replicate, strategy="*", budget="*",
                                     error=type(exc).__name__, message=str(exc))])


@dataclass
class ExperimentResult:
    table: ResultTable
    replicates: list
    failures: list
    out_dir: Path | None = None


def _f(x) -> str:
    return repr(float(x))


def write_artifacts(config: ExperimentConfig, outputs: list, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = config.names
    M = config.measurement_schedule.M
    with (out / "replicate_results.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for rep in outputs:
            for run in rep.runs:
                for feat, r in run.summary.items():
                    w.writerow([rep.replicate, run.strategy, run.budget, feat, _f(r["truth"]),
                                _f(r["post_mean"]), _f(r["post_sd"]), _f(r["q025"]), _f(r["q975"]),
                                r["covered"]])
    with (out / "selections.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "strategy", "budget", "wave", "round", "id", "age", "criterion", "dropped_draws"]
                   + [f"prev_{n}" for n in names])
        for rep in outputs:
            for run in rep.runs:
                for res in run.selections:
                    for k, rid in enumerate(res.ids):
                        crit = res.criterion_trace[k] if len(res.criterion_trace) else float("nan")
                        w.writerow([rep.replicate, run.strategy, run.budget, res.wave, k + 1, rid,
                                    _f(res.ages[k]), "" if np.isnan(crit) else _f(crit),
                                    len(res.dropped_draws)]
                                   + ["" if np.isnan(v) else _f(v) for v in res.previous[k]])
    with (out / "designs.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "strategy", "budget", "id"] + [f"w{m}" for m in range(M + 1)])
        for rep in outputs:
            for run in rep.runs:
                for j, rid in enumerate(rep.ids):
                    w.writerow([rep.replicate, run.strategy, run.budget, rid] + [int(v) for v in run.design.xi[j]])
    with (out / "failures.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, FAILURE_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in outputs:
            w.writerows(rep.failures)
    meta = {
        "package_version": __version__,
        "config_ini": config.to_ini(),
        "master_seed": config.seed,
        "replicates": config.replicates,
        "cohort_seeds": [derive_seed(config.seed, r, _COHORT) for r in range(config.replicates)],
        "true_beta": config.true_beta(),
        "runs": [[s, budget_label(b)] for s, b in _runs(config)],
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.ini").write_text(config.to_ini(), encoding="utf-8")


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int | None = None) -> ExperimentResult:
    """Run ``config.replicates`` replicates (in parallel when ``workers`` >
    1), write raw artifacts to ``out_dir`` if given and aggregate."""
    workers = config.workers if workers is None else workers
    reps = range(config.replicates)
    if workers > 1:
        from joblib import Parallel, delayed

        outputs = Parallel(n_jobs=workers)(delayed(_safe_replicate)(config, r) for r in reps)
    else:
        outputs = [_safe_replicate(config, r) for r in reps]
    outputs.sort(key=lambda o: o.replicate)
    failures = [f for o in outputs for f in o.failures]
    rows = [dict(replicate=o.replicate, strategy=run.strategy, budget=run.budget, parameter=feat, **r)
            for o in outputs for run in o.runs for feat, r in run.summary.items()]
    table = aggregate(rows, expected_replicates=config.replicates)
    if out_dir is not None:
        write_artifacts(config, outputs, out_dir)
    if failures:
        log.warning("%d run(s) failed; see failures.csv", len(failures))
    return ExperimentResult(table, outputs, failures, Path(out_dir) if out_dir is not None else None)
