"""Cohort data model: measurement schedule, covariate panel, survival
histories and re-measurement designs.

Ages are stored in days; the measurement schedule is given in years from
baseline and converted with ``DAYS_PER_YEAR``.

A cohort carries ``followed_to``, the index of the schedule boundary up to
which survival has been observed.  A complete cohort has
``followed_to == M + 1``; :func:`truncate` produces the view of the data that
is available just before wave ``m`` (survival known up to tau_m, covariates
measured at waves ``0..m-1``).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DAYS_PER_YEAR = 365.25

CONTINUOUS = "continuous"
BINARY = "binary"
KINDS = (CONTINUOUS, BINARY)


class CohortError(ValueError):
    """Invalid cohort, schedule or design."""


class CohortParseError(CohortError):
    """Malformed cohort or design file."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MeasurementSchedule:
    """Calendar times tau_0..tau_M of the measurements and the end of
    follow-up tau_{M+1}, in years from baseline."""

    times: tuple[float, ...]
    follow_up_end: float

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "follow_up_end", float(self.follow_up_end))
        if len(times) < 2:
            raise CohortError("schedule needs a baseline and at least one re-measurement")
        if times[0] != 0.0:
            raise CohortError("schedule must start at 0")
        bounds = np.array(times + (self.follow_up_end,))
        if not np.all(np.isfinite(bounds)) or np.any(np.diff(bounds) <= 0):
            raise CohortError(f"schedule is not strictly increasing: {bounds.tolist()}")

    @property
    def M(self) -> int:
        return len(self.times) - 1

    @property
    def boundaries(self) -> np.ndarray:
        """tau_0..tau_{M+1} in years."""
        return np.array(self.times + (self.follow_up_end,))

    def wave_ages(self, baseline_age: np.ndarray) -> np.ndarray:
        """Ages (days) at tau_0..tau_{M+1}, shape (N, M+2)."""
        return np.asarray(baseline_age, float)[:, None] + self.boundaries[None, :] * DAYS_PER_YEAR


@dataclass(frozen=True)
class CovariatePanel:
    """Raw covariate values, shape (N, M+1, H).  Missing cells hold NaN and
    are flagged in ``missing_mask``."""

    values: np.ndarray
    missing_mask: np.ndarray
    kinds: tuple[str, ...]
    names: tuple[str, ...]
    centering_offsets: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, float)
        mask = np.asarray(self.missing_mask, bool) | np.isnan(values)
        if values.ndim != 3:
            raise CohortError("covariate values must be (N, waves, H)")
        if len(self.kinds) != values.shape[2] or len(self.names) != values.shape[2]:
            raise CohortError("kinds/names do not match the number of covariates")
        for h, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise CohortError(f"unknown covariate kind {kind!r}")
            if kind == BINARY:
                v = values[..., h][~mask[..., h]]
                if not np.all((v == 0) | (v == 1)):
                    raise CohortError(f"binary covariate {self.names[h]!r} has values outside {{0,1}}")
        values = np.where(mask, np.nan, values)
        offsets = np.asarray(self.centering_offsets, float)
        if offsets.shape != (values.shape[2],) or not np.all(np.isfinite(offsets)):
            raise CohortError("centering offsets must be finite, one per covariate")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "missing_mask", _frozen(mask))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "centering_offsets", _frozen(offsets))

    @classmethod
    def from_values(cls, values, kinds, names, offsets=None) -> "CovariatePanel":
        values = np.asarray(values, float)
        mask = np.isnan(values)
        if offsets is None:
            offsets = baseline_means(values)
        return cls(values, mask, tuple(kinds), tuple(names), offsets)

    @property
    def H(self) -> int:
        return self.values.shape[2]

    def centered(self) -> np.ndarray:
        return self.values - self.centering_offsets


def baseline_means(values: np.ndarray) -> np.ndarray:
    """Means of the observed baseline values per covariate (0 if none)."""
    base = values[:, 0, :]
    out = np.zeros(base.shape[1])
    for h in range(base.shape[1]):
        obs = base[:, h][~np.isnan(base[:, h])]
        if obs.size:
            out[h] = obs.mean()
    return out


@dataclass(frozen=True)
class SurvivalHistory:
    """Per-individual baseline age, exit age (event or censoring) and event
    indicator, all in days."""

    baseline_age: np.ndarray
    exit_age: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.baseline_age, float)
        e = np.asarray(self.exit_age, float)
        d = np.asarray(self.event, np.int8)
        if not (b.shape == e.shape == d.shape) or b.ndim != 1:
            raise CohortError("survival arrays must be 1-D of equal length")
        if np.any(~np.isfinite(b)) or np.any(b <= 0):
            raise CohortError("baseline ages must be positive")
        bad = np.flatnonzero(~(e > b))
        if bad.size:
            raise CohortError(f"event/censoring at or before baseline for individual index {bad[0]}")
        if np.any((d != 0) & (d != 1)):
            raise CohortError("event indicator must be 0 or 1")
        object.__setattr__(self, "baseline_age", _frozen(b))
        object.__setattr__(self, "exit_age", _frozen(e))
        object.__setattr__(self, "event", _frozen(d))


@dataclass(frozen=True)
class IntervalRecords:
    """Piecewise survival records on the (N, K) grid of individuals by
    intervals (tau_k, tau_{k+1}], K = ``followed_to``.

    ``active[j, k]`` marks records that exist; ``t_lo``/``t_hi`` are ages
    (days) and ``delta`` the event indicator of the interval.  Inactive
    entries hold harmless placeholders (t_lo=1, t_hi=2, delta=0).
    """

    t_lo: np.ndarray
    t_hi: np.ndarray
    delta: np.ndarray
    active: np.ndarray

    @property
    def last_alive_wave(self) -> np.ndarray:
        return self.active.sum(axis=1) - 1


@dataclass(frozen=True)
class Cohort:
    ids: tuple[str, ...]
    schedule: MeasurementSchedule
    panel: CovariatePanel
    survival: SurvivalHistory
    followed_to: int = -1

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise CohortError("duplicate individual ids")
        if self.panel.values.shape[:2] != (n, self.schedule.M + 1):
            raise CohortError("panel shape does not match ids/schedule")
        if self.survival.baseline_age.shape != (n,):
            raise CohortError("survival history does not match ids")
        f = self.schedule.M + 1 if self.followed_to == -1 else int(self.followed_to)
        if not 1 <= f <= self.schedule.M + 1:
            raise CohortError(f"followed_to must be in 1..{self.schedule.M + 1}")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "followed_to", f)

    @property
    def N(self) -> int:
        return len(self.ids)

    @property
    def H(self) -> int:
        return self.panel.H

    @cached_property
    def wave_ages(self) -> np.ndarray:
        return self.schedule.wave_ages(self.survival.baseline_age)

    @cached_property
    def exit_within(self) -> tuple[np.ndarray, np.ndarray]:
        """Exit age and event indicator as seen at the current follow-up end."""
        end = self.wave_ages[:, self.followed_to]
        e = self.survival.exit_age
        ev = (self.survival.event == 1) & (e <= end)
        return np.minimum(e, end), ev.astype(np.int8)

    @cached_property
    def records(self) -> IntervalRecords:
        K = self.followed_to
        A = self.wave_ages
        exit_, ev = self.exit_within
        lo = A[:, :K]
        active = exit_[:, None] > lo
        hi = np.minimum(A[:, 1 : K + 1], exit_[:, None])
        delta = (active & (ev[:, None] == 1) & (exit_[:, None] <= A[:, 1 : K + 1])).astype(np.int8)
        return IntervalRecords(
            t_lo=_frozen(np.where(active, lo, 1.0)),
            t_hi=_frozen(np.where(active, hi, 2.0)),
            delta=_frozen(delta),
            active=_frozen(active),
        )

    @property
    def applicable(self) -> np.ndarray:
        """Covariate cells (N, K) that belong to the model: individual alive
        at the wave and the wave lies inside the current follow-up."""
        return self.records.active

    def observed_mask(self) -> np.ndarray:
        """(N, K, H) cells that are applicable and measured."""
        K = self.followed_to
        return self.applicable[:, :, None] & ~self.panel.missing_mask[:, :K, :]

    def missing_cells(self) -> np.ndarray:
        """(N, K, H) applicable cells without a measurement."""
        K = self.followed_to
        return self.applicable[:, :, None] & self.panel.missing_mask[:, :K, :]

    def fingerprint(self) -> str:
        """Digest of what is observed: follow-up extent and missingness."""
        h = hashlib.sha256()
        h.update(str(self.followed_to).encode())
        h.update(np.packbits(self.panel.missing_mask).tobytes())
        return h.hexdigest()[:16]


def at_risk(cohort: Cohort, m: int) -> np.ndarray:
    """Indices of individuals alive and uncensored at tau_m.

    ``m`` may range over 1..followed_to; ``m = M + 1`` on a complete cohort
    counts those alive at the end of follow-up.
    """
    if not 1 <= m <= cohort.followed_to:
        raise CohortError(f"wave {m} out of range 1..{cohort.followed_to}")
    A = cohort.wave_ages[:, m]
    exit_, ev = cohort.exit_within
    alive = exit_ > A
    if m == cohort.followed_to:
        alive |= (exit_ == A) & (ev == 0)
    return np.flatnonzero(alive)


def truncate(cohort: Cohort, m: int) -> Cohort:
    """Data available just before the wave-``m`` measurement: survival up to
    tau_m, covariates at waves ``< m`` (later waves flagged missing)."""
    if not 1 <= m <= cohort.schedule.M + 1:
        raise CohortError(f"cannot truncate at wave {m}")
    values = np.array(cohort.panel.values)
    values[:, m:, :] = np.nan
    panel = replace(cohort.panel, values=values, missing_mask=np.isnan(values))
    return replace(cohort, panel=panel, followed_to=min(m, cohort.followed_to))


@dataclass(frozen=True)
class Design:
    """Indicator matrix xi (N, M+1): xi[j, m] = 1 if individual j is
    measured at wave m."""

    xi: np.ndarray
    column_budgets: tuple[int | None, ...] = field(default=())

    def __post_init__(self):
        xi = np.asarray(self.xi)
        if xi.ndim != 2 or np.any((xi != 0) & (xi != 1)):
            raise CohortError("design must be a 0/1 matrix")
        object.__setattr__(self, "xi", _frozen(xi.astype(np.int8)))
        budgets = tuple(self.column_budgets) or (None,) * xi.shape[1]
        if len(budgets) != xi.shape[1]:
            raise CohortError("one budget per wave required")
        object.__setattr__(self, "column_budgets", budgets)

    @classmethod
    def baseline(cls, cohort: Cohort, budgets: Sequence[int | None] | None = None) -> "Design":
        xi = np.zeros((cohort.N, cohort.schedule.M + 1), np.int8)
        xi[:, 0] = 1
        return cls(xi, tuple(budgets) if budgets is not None else ())

    def with_column(self, m: int, selected: Sequence[int]) -> "Design":
        xi = np.array(self.xi)
        xi[:, m] = 0
        xi[np.asarray(selected, int), m] = 1
        return replace(self, xi=xi)


def validate_design(design: Design, cohort: Cohort, waves: Sequence[int] | None = None) -> None:
    """Check column sums and that only at-risk individuals are selected."""
    if design.xi.shape != (cohort.N, cohort.schedule.M + 1):
        raise CohortError("design shape does not match cohort")
    if waves is None:
        waves = range(min(cohort.followed_to, cohort.schedule.M + 1))
    for m in waves:
        col = design.xi[:, m]
        if m == 0:
            if not np.all(col == 1):
                raise CohortError("baseline column must select everyone")
            continue
        risk = at_risk(cohort, m)
        outside = np.setdiff1d(np.flatnonzero(col), risk)
        if outside.size:
            raise CohortError(f"wave {m}: individual {cohort.ids[outside[0]]} is not at risk")
        n = design.column_budgets[m]
        if n is not None and col.sum() != min(n, risk.size):
            raise CohortError(f"wave {m}: column sum {col.sum()} != min({n}, {risk.size})")


def apply_design(cohort: Cohort, design: Design) -> Cohort:
    """Flag covariate cells not selected by ``design`` as missing."""
    xi = design.xi
    if xi.shape != cohort.panel.values.shape[:2]:
        raise CohortError("design shape does not match cohort")
    drop = xi[:, :, None] == 0
    values = np.where(drop, np.nan, cohort.panel.values)
    panel = replace(cohort.panel, values=values, missing_mask=cohort.panel.missing_mask | drop)
    return replace(cohort, panel=panel)


# --------------------------------------------------------------------------
# CSV persistence


@dataclass(frozen=True)
class CohortSchema:
    """What the cohort CSV does not carry: the schedule and covariate kinds.

    ``covariates`` maps name -> kind in panel order; if empty, names are
    taken from the header and kinds default to continuous.
    """

    schedule: MeasurementSchedule
    covariates: Mapping[str, str] = field(default_factory=dict)


def _id_key(s: str):
    try:
        return (0, int(s), "")
    except ValueError:
        return (1, 0, s)


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise CohortParseError(f"column {col!r}: cannot parse {cell!r}", row) from None
    if not np.isfinite(v):
        raise CohortParseError(f"column {col!r}: non-finite value", row)
    return v


def load_cohort(path: str | Path, schema: CohortSchema) -> Cohort:
    path = Path(path)
    M = schema.schedule.M
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("empty file") from None
        header = [h.strip() for h in header]
        if header[:2] != ["id", "baseline_age"] or header[-2:] != ["event_age", "event"]:
            raise CohortParseError("header must be id,baseline_age,<cov>_w0..,event_age,event", 1)
        cov_cols = header[2:-2]
        if schema.covariates:
            names = list(schema.covariates)
        else:
            names = []
            for c in cov_cols:
                stem = c.rsplit("_w", 1)[0]
                if stem not in names:
                    names.append(stem)
        expected = [f"{n}_w{m}" for n in names for m in range(M + 1)]
        if cov_cols != expected:
            raise CohortParseError(f"covariate columns {cov_cols} do not match schedule/schema {expected}", 1)
        kinds = [schema.covariates.get(n, CONTINUOUS) for n in names]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            row = [c.strip() for c in row]
            rid = row[0]
            if not rid:
                raise CohortParseError("empty id", lineno)
            base = _parse_float(row[1], lineno, "baseline_age")
            vals = [np.nan if c == "" else _parse_float(c, lineno, col) for c, col in zip(row[2:-2], cov_cols)]
            exit_age = _parse_float(row[-2], lineno, "event_age")
            if row[-1] not in ("0", "1"):
                raise CohortParseError(f"event must be 0 or 1, got {row[-1]!r}", lineno)
            if exit_age <= base:
                raise CohortError(f"row {lineno}: event before baseline")
            rows.append((rid, base, vals, exit_age, int(row[-1]), lineno))
    rows.sort(key=lambda r: _id_key(r[0]))
    N, H = len(rows), len(names)
    values = np.full((N, M + 1, H), np.nan)
    for i, r in enumerate(rows):
        values[i] = np.array(r[2], float).reshape(H, M + 1).T
    try:
        panel = CovariatePanel.from_values(values, kinds, names)
    except CohortError as exc:
        raise CohortError(f"{path}: {exc}") from None
    surv = SurvivalHistory(
        np.array([r[1] for r in rows]), np.array([r[3] for r in rows]), np.array([r[4] for r in rows])
    )
    return Cohort(tuple(r[0] for r in rows), schema.schedule, panel, surv)


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    M = cohort.schedule.M
    names = cohort.panel.names
    header = ["id", "baseline_age"] + [f"{n}_w{m}" for n in names for m in range(M + 1)] + ["event_age", "event"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j, rid in enumerate(cohort.ids):
            vals = [_fmt(cohort.panel.values[j, m, h]) for h in range(len(names)) for m in range(M + 1)]
            w.writerow(
                [rid, _fmt(cohort.survival.baseline_age[j])]
                + vals
                + [_fmt(cohort.survival.exit_age[j]), int(cohort.survival.event[j])]
            )


def load_design(path: str | Path, cohort: Cohort) -> Design:
    index = {rid: j for j, rid in enumerate(cohort.ids)}
    M = cohort.schedule.M
    xi = np.zeros((cohort.N, M + 1), np.int8)
    seen = set()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id"] + [f"w{m}" for m in range(M + 1)]:
            raise CohortParseError("design header must be id,w0..wM", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != M + 2 or row[0] not in index or any(c not in ("0", "1") for c in row[1:]):
                raise CohortParseError("bad design row", lineno)
            seen.add(row[0])
            xi[index[row[0]]] = [int(c) for c in row[1:]]
    if len(seen) != cohort.N:
        raise CohortParseError("design does not cover every individual")
    return Design(xi)


def save_design(design: Design, cohort: Cohort, path: str | Path) -> None:
    M = design.xi.shape[1] - 1
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"w{m}" for m in range(M + 1)])
        for j, rid in enumerate(cohort.ids):
            w.writerow([rid] + [int(v) for v in design.xi[j]])
