"""Aggregation of replicate results into design-comparison tables.

A :class:`ResultTable` holds, per (strategy, budget, parameter), the mean
and SD of the posterior means over replicates and the mean posterior SE.
It is written as CSV and JSON at full precision (both re-parse exactly)
and as an aligned text table rounded to 3 significant digits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TABLE_FIELDS = ["strategy", "budget", "parameter", "mean", "sd", "mean_se", "coverage", "replicates",
                "expected_replicates"]


class ReportError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ResultRow:
    strategy: str
    budget: str
    parameter: str
    mean: float
    sd: float  # NaN when fewer than two replicates
    mean_se: float
    coverage: float
    replicates: int
    expected_replicates: int

    @property
    def sd_available(self) -> bool:
        return self.replicates > 1

    @property
    def partial(self) -> bool:
        return self.replicates < self.expected_replicates


@dataclass(frozen=True)
class ResultTable:
    rows: tuple[ResultRow, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for r in self.rows:
            if r.sd_available and not r.sd >= 0:
                raise ValueError(f"negative or missing SD in row {r}")

    @property
    def partial(self) -> bool:
        return any(r.partial for r in self.rows)

    def get(self, strategy: str, budget: str, parameter: str) -> ResultRow:
        for r in self.rows:
            if (r.strategy, r.budget, r.parameter) == (strategy, budget, parameter):
                return r
        raise KeyError((strategy, budget, parameter))

    # ---- persistence -----------------------------------------------------

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_FIELDS)
            for r in self.rows:
                w.writerow([r.strategy, r.budget, r.parameter, _num(r.mean), _num(r.sd), _num(r.mean_se),
                            _num(r.coverage), r.replicates, r.expected_replicates])

    @classmethod
    def from_csv(cls, path) -> "ResultTable":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != TABLE_FIELDS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [ResultRow(d["strategy"], d["budget"], d["parameter"], _parse(d["mean"]), _parse(d["sd"]),
                              _parse(d["mean_se"]), _parse(d["coverage"]), int(d["replicates"]),
                              int(d["expected_replicates"])) for d in reader]
        return cls(tuple(rows))

    def to_json(self, path) -> None:
        doc = {"partial": self.partial,
               "rows": [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                         for k, v in asdict(r).items()} for r in self.rows]}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "ResultTable":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = []
        for d in doc["rows"]:
            d = {k: (float("nan") if v is None else v) for k, v in d.items()}
            rows.append(ResultRow(**d))
        return cls(tuple(rows))

    def to_text(self) -> str:
        """Aligned table, one block per strategy and budget, 3 significant
        digits.  SDs from a single replicate print as 'n/a'."""
        head = ["strategy", "budget", "parameter", "mean", "SD", "SE", "coverage", "reps"]
        body = []
        for r in self.rows:
            reps = f"{r.replicates}/{r.expected_replicates}" if r.partial else str(r.replicates)
            body.append([r.strategy, r.budget, r.parameter, fmt3(r.mean),
                         fmt3(r.sd) if r.sd_available else "n/a", fmt3(r.mean_se), f"{r.coverage:.2f}", reps])
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.partial:
            lines.append("partial aggregation: some replicates failed (see failures.csv)")
        return "\n".join(line.rstrip() for line in lines) + "\n"


def fmt3(x: float) -> str:
    if x is None or math.isnan(x):
        return "n/a"
    return f"{x:#.3g}".rstrip(".")


def _num(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def _parse(s: str) -> float:
    return float("nan") if s == "" else float(s)


def aggregate(rows, expected_replicates: int) -> ResultTable:
    """Reduce per-replicate rows (dicts with strategy, budget, parameter,
    post_mean, post_sd, covered) to a :class:`ResultTable`.  Group order
    follows first appearance."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["budget"], r["parameter"]), []).append(r)
    out = []
    for (s, b, p), g in groups.items():
        means = np.array([float(r["post_mean"]) for r in g])
        ses = np.array([float(r["post_sd"]) for r in g])
        cov = np.array([float(r["covered"]) for r in g])
        n = len(g)
        out.append(ResultRow(s, b, p, float(means.mean()), float(means.std(ddof=1)) if n > 1 else float("nan"),
                             float(ses.mean()), float(cov.mean()), n, expected_replicates))
    return ResultTable(tuple(out))


def read_replicate_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"missing artifact {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report(artifact_dir, out_dir=None) -> ResultTable:
    """Rebuild the result table from raw artifacts and write
    ``result_table.{csv,json,txt}`` plus ``selection_order.csv`` (selection
    round against age and previous covariate values, ages in years)."""
    src = Path(artifact_dir)
    dst = Path(out_dir) if out_dir is not None else src
    meta_path = src / "metadata.json"
    if not meta_path.exists():
        raise ReportError(f"missing artifact {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    rows = read_replicate_results(src / "replicate_results.csv")
    table = aggregate(rows, int(meta["replicates"]))
    dst.mkdir(parents=True, exist_ok=True)
    table.to_csv(dst / "result_table.csv")
    table.to_json(dst / "result_table.json")
    (dst / "result_table.txt").write_text(table.to_text(), encoding="utf-8")
    sel = src / "selections.csv"
    if not sel.exists():
        raise ReportError(f"missing artifact {sel}")
    with sel.open(newline="", encoding="utf-8") as fh, \
            (dst / "selection_order.csv").open("w", newline="", encoding="utf-8") as out:
        reader = csv.DictReader(fh)
        prev = [c for c in (reader.fieldnames or []) if c.startswith("prev_")]
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["replicate", "strategy", "budget", "wave", "round", "age_years"] + prev)
        for d in reader:
            w.writerow([d["replicate"], d["strategy"], d["budget"], d["wave"], d["round"],
                        repr(float(d["age"]) / 365.25)] + [d[c] for c in prev])
    return table
