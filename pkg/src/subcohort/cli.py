"""Command line interface.

    subcohort generate   --profile desk --seed 1 --out cohort.csv
    subcohort estimate   --cohort cohort.csv [--design design.csv] --out summary.csv
    subcohort select     --cohort cohort.csv --wave 1 --strategy dbeta --budget 100 --out design.csv
    subcohort experiment --profile desk --out results/
    subcohort report     results/ [--out tables/]

Cohort files carry no schedule or covariate kinds; those come from the
config (``--config`` or ``--profile``).  Exit codes: 0 success, 2 config or
usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .cohort import CohortError, CohortSchema, Design, apply_design, load_cohort, load_design, save_cohort, save_design
from .harness.config import PROFILES, ConfigError, ExperimentConfig, load_config
from .mcmc import PriorSpec, posterior_summary, read_posterior_csv, run_chain
from .selection import DBETA, STRATEGIES, SelectionSettings, observed_before, run_wave

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("subcohort")


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    base = PROFILES[args.profile]()
    cfg = load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _schema(cfg: ExperimentConfig) -> CohortSchema:
    return CohortSchema(cfg.measurement_schedule, dict(zip(cfg.names, cfg.kinds)))


def _load(args, cfg):
    if not args.cohort:
        raise UsageError("--cohort is required")
    cohort = load_cohort(args.cohort, _schema(cfg))
    design = load_design(args.design, cohort) if args.design else None
    return cohort, design


def cmd_generate(args) -> None:
    from .harness.generate import generate_cohort

    cfg = _config(args)
    cohort = generate_cohort(cfg, cfg.seed)
    save_cohort(cohort, _out(args))


def cmd_estimate(args) -> None:
    cfg = _config(args)
    cohort, design = _load(args, cfg)
    if design is not None:
        cohort = apply_design(cohort, design)
    sample = run_chain(cohort, cfg.analysis_model, PriorSpec(), cfg.mcmc.settings(cfg.seed))
    out = _out(args)
    import csv

    summ = posterior_summary(sample, [n for n in sample.names])
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "mean", "sd", "q025", "q50", "q975"])
        for name, s in summ.items():
            q = s["quantiles"]
            w.writerow([name, repr(s["mean"]), repr(s["sd"]), repr(q[0.025]), repr(q[0.5]), repr(q[0.975])])
    if args.draws_out:
        sample.to_csv(args.draws_out, include_imputed=True, ids=cohort.ids)


def cmd_select(args) -> None:
    cfg = _config(args)
    cohort, design = _load(args, cfg)
    M = cfg.measurement_schedule.M
    if args.wave is None or not 1 <= args.wave <= M:
        raise UsageError(f"--wave must be between 1 and {M}")
    if args.budget is None and args.strategy != "full":
        raise UsageError("--budget is required for dbeta and srs")
    if design is None:
        design = Design.baseline(cohort)
    settings = SelectionSettings(q=cfg.draws, mc_reps=cfg.mc_reps, budget=args.budget or 1, seed=cfg.seed,
                                 tie_tolerance=cfg.tie_tolerance,
                                 drop_singular=cfg.singular_draws == "drop")
    posterior = None
    if args.strategy == DBETA:
        seen = observed_before(cohort, design, args.wave)
        if args.posterior:
            posterior = read_posterior_csv(args.posterior, seen, cfg.selection_model.feature_map.feature_names)
        else:
            posterior = run_chain(seen, cfg.selection_model, PriorSpec(), cfg.mcmc.settings(cfg.seed))
    design, audit = run_wave(cohort, design, args.wave, args.strategy, settings, posterior, cfg.selection_model)
    save_design(design, cohort, _out(args))
    if args.order_out:
        audit.result.to_csv(args.order_out, cohort.panel.names)


def cmd_experiment(args) -> None:
    from .harness.experiment import run_experiment
    from .harness.report import report

    cfg = _config(args)
    if args.replicates is not None:
        cfg = replace(cfg, replicates=args.replicates)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.strategy:
        cfg = replace(cfg, strategies=(args.strategy,))
    if args.budget is not None:
        cfg = replace(cfg, budgets=((args.budget,),))
    out = _out(args)
    result = run_experiment(cfg, out)
    report(out)
    sys.stdout.write(result.table.to_text())
    if result.failures:
        raise RuntimeError(f"{len(result.failures)} run(s) failed; see {Path(out) / 'failures.csv'}")


def cmd_report(args) -> None:
    from .harness.report import report

    table = report(args.artifacts, args.out)
    sys.stdout.write(table.to_text())


def _out(args) -> str:
    if not args.out:
        raise UsageError("--out is required")
    return args.out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config; unspecified keys come from the profile")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cohort", help="cohort CSV")
    data.add_argument("--design", help="design CSV (id,w0..wM)")

    p = argparse.ArgumentParser(prog="subcohort", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a cohort CSV")
    e = sub.add_parser("estimate", parents=[common, data], help="fit the analysis model, write a posterior summary")
    e.add_argument("--draws-out", help="also write the draws, imputed cells included")
    s = sub.add_parser("select", parents=[common, data], help="select the subcohort for one wave")
    s.add_argument("--wave", type=int)
    s.add_argument("--strategy", choices=STRATEGIES, default=DBETA)
    s.add_argument("--budget", type=int)
    s.add_argument("--posterior", help="draws CSV fitted to the data seen before the wave (fitted if omitted)")
    s.add_argument("--order-out", help="also write the selection order CSV")
    x = sub.add_parser("experiment", parents=[common], help="run a replicated design comparison")
    x.add_argument("--strategy", choices=STRATEGIES)
    x.add_argument("--budget", type=int)
    x.add_argument("--replicates", type=int)
    x.add_argument("--workers", type=int)
    r = sub.add_parser("report", parents=[common], help="tables from experiment artifacts")
    r.add_argument("artifacts", help="experiment output directory")
    return p


COMMANDS = {"generate": cmd_generate, "estimate": cmd_estimate, "select": cmd_select,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CohortError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
