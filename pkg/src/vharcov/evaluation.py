"""Forecast-error scoring and LASSO selection statistics."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DimensionError, InsufficientHistoryError, ParseError
from .forecaster import FitRecord, ForecastSet
from .panel_io import CovPanel, vech, vech_many

CLASSES = ("variance", "covariance")


@dataclass(frozen=True)
class ScoreReport:
    dates: np.ndarray
    per_day_l2: np.ndarray
    avg_l2: float
    ratio_to_rw: float | None = None


@dataclass(frozen=True)
class SelectionReport:
    """Per-day selection summaries keyed by equation class.

    ``per_day_change_pct`` starts on the second day (flips are counted
    against the previous day), so its vectors are one shorter than the
    size vectors and line up with ``dates[1:]``.
    """

    dates: np.ndarray
    per_day_avg_size: dict
    per_day_change_pct: dict


def l2_error(forecast, actual) -> float:
    """Euclidean norm of ``vech(forecast - actual)``."""
    f = np.asarray(forecast, dtype=float)
    a = np.asarray(actual, dtype=float)
    if f.shape != a.shape:
        raise DimensionError(f"forecast shape {f.shape} does not match actual shape {a.shape}")
    if f.ndim == 0:
        return float(abs(f - a))
    return float(np.linalg.norm(vech(f - a)))


def _align(forecasts: ForecastSet, panel: CovPanel) -> np.ndarray:
    pos = np.searchsorted(panel.dates, forecasts.dates)
    pos_c = np.minimum(pos, panel.t - 1)
    missing = forecasts.dates[(pos >= panel.t) | (panel.dates[pos_c] != forecasts.dates)]
    if missing.size:
        raise AlignmentError(f"{missing.size} forecast date(s) absent from the panel", missing)
    return pos_c


def score(forecasts: ForecastSet, panel: CovPanel, rw_baseline: ForecastSet | None = None) -> ScoreReport:
    """Per-day l2 errors against the realized panel and the ratio of means to a baseline."""
    pos = _align(forecasts, panel)
    n = forecasts.sigma_hat.shape[-1]
    if n != panel.n:
        raise DimensionError(f"forecasts are {n} x {n}, panel has {panel.n} assets")
    err = np.linalg.norm(vech_many(forecasts.sigma_hat) - panel.mats[pos], axis=1)
    avg = float(err.mean())
    ratio = None
    if rw_baseline is not None:
        if rw_baseline.dates.shape != forecasts.dates.shape or np.any(rw_baseline.dates != forecasts.dates):
            common = np.setxor1d(rw_baseline.dates, forecasts.dates)
            raise AlignmentError("baseline and model forecast dates differ", common)
        base = np.linalg.norm(vech_many(rw_baseline.sigma_hat) - panel.mats[pos], axis=1).mean()
        if base > 0:
            ratio = avg / float(base)
        else:
            ratio = 1.0 if avg == 0 else float("inf")
    return ScoreReport(forecasts.dates.copy(), err, avg, ratio)


def _default_class(rec: FitRecord) -> str:
    return rec.klass


def selection_stats(fits, splitter=_default_class) -> SelectionReport:
    """Daily average model size and selection churn per equation class.

    ``fits`` is a sequence of FitRecord (from a ForecastSet or the sidecar
    file). ``splitter`` maps a record to its class label. A flip is a
    predictor entering or leaving the active set between consecutive days;
    each equation's flip count is expressed as a percentage of its maximum
    predictor count before averaging within the class.
    """
    by_day: OrderedDict = OrderedDict()
    for rec in fits:
        by_day.setdefault(np.datetime64(rec.date, "D"), {})[(rec.group, rec.equation)] = rec
    if len(by_day) < 2:
        raise InsufficientHistoryError("selection statistics need fits from at least two days")
    dates = np.array(sorted(by_day), dtype="datetime64[D]")
    classes = sorted({splitter(r) for day in by_day.values() for r in day.values()},
                     key=lambda c: (CLASSES.index(c) if c in CLASSES else len(CLASSES), c))
    size = {c: np.full(dates.size, np.nan) for c in classes}
    change = {c: np.full(dates.size - 1, np.nan) for c in classes}
    prev = None
    for i, d in enumerate(dates):
        day = by_day[d]
        acc = {c: [] for c in classes}
        flips = {c: [] for c in classes}
        for key, rec in day.items():
            c = splitter(rec)
            acc[c].append(rec.n_active)
            if prev is not None and key in prev and rec.max_predictors > 0:
                diff = set(rec.active) ^ set(prev[key].active)
                flips[c].append(100.0 * len(diff) / rec.max_predictors)
        for c in classes:
            if acc[c]:
                size[c][i] = float(np.mean(acc[c]))
            if i > 0 and flips[c]:
                change[c][i - 1] = float(np.mean(flips[c]))
        prev = day
    return SelectionReport(dates, size, change)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _g(x) -> str:
    return "" if x is None else format(float(x), ".12g")


def save_scores(path, reports: dict) -> None:
    """Tidy CSV ``date,model,metric,value`` with one ``l2`` row per day and model."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "model", "metric", "value"])
        for name, rep in reports.items():
            for d, e in zip(rep.dates, rep.per_day_l2):
                w.writerow([str(d), name, "l2", _g(e)])


def save_ratio_table(path, reports: dict) -> None:
    """One row per model: average l2 and its ratio to the random walk."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "avg_l2", "ratio_to_rw"])
        for name, rep in reports.items():
            w.writerow([name, _g(rep.avg_l2), _g(rep.ratio_to_rw)])


def save_selection(path, report: SelectionReport) -> None:
    """Tidy CSV ``date,class,metric,value`` for average size and change percentage."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "class", "metric", "value"])
        for c, vals in report.per_day_avg_size.items():
            for d, v in zip(report.dates, vals):
                w.writerow([str(d), c, "avg_size", _g(v)])
        for c, vals in report.per_day_change_pct.items():
            for d, v in zip(report.dates[1:], vals):
                w.writerow([str(d), c, "change_pct", _g(v)])


_FIT_HEADER = ["date", "group", "equation", "class", "n_active", "max_predictors", "lambda", "bic", "active"]


def save_fits(path, fits) -> None:
    """Per-day, per-equation fit summaries (active predictors space separated)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIT_HEADER)
        for r in fits:
            w.writerow([str(np.datetime64(r.date, "D")), r.group, r.equation, r.klass, r.n_active,
                        r.max_predictors, repr(float(r.lam)), repr(float(r.bic)),
                        " ".join(str(j) for j in r.active)])


def load_fits(path) -> list[FitRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"fits file not found: {path}")
    out = []
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != _FIT_HEADER:
            raise ParseError(f"unexpected fits header {header}", 1, 1)
        for line, row in enumerate(rows, start=2):
            if len(row) != len(_FIT_HEADER):
                raise ParseError(f"expected {len(_FIT_HEADER)} fields, got {len(row)}", line, len(row))
            try:
                active = tuple(int(j) for j in row[8].split())
                rec = FitRecord(np.datetime64(row[0], "D"), row[1], int(row[2]), row[3], int(row[4]),
                                int(row[5]), float(row[6]), float(row[7]), active)
            except ValueError as exc:
                raise ParseError(f"malformed fits row: {exc}", line, 1) from exc
            out.append(rec)
    return out
