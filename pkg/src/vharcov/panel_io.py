"""Covariance and return panels: containers, vech primitives, cleaning, file IO.

A covariance panel stores one half-vectorized matrix per day. The vech order
is the lower triangle read column by column::

    (1,1), (2,1), ..., (N,1), (2,2), ..., (N,N)

Every other module relies on this order.

File formats
------------
CSV covariance panel
    header ``date,v1,...,vM`` (M = N(N+1)/2), one row per day, ISO dates,
    values printed with 17 significant digits. Asset ids and N live in a
    sidecar ``<path>.json`` manifest.
Binary covariance panel
    ``b"CVP1"``, N and T as little-endian uint64, T dates as int64 days since
    1970-01-01, then T*M little-endian float64 values. Asset ids live in the
    same sidecar manifest.
CSV returns panel
    header ``date,risk_free,<asset ids...>``.
Binary returns panel
    ``b"RTP1"``, N, T (uint64), T dates (int64), T*N returns, T risk-free
    rates (float64). Asset ids in the sidecar manifest.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

SYMMETRY_RTOL = 1e-10

_COV_MAGIC = b"CVP1"
_RET_MAGIC = b"RTP1"


# ---------------------------------------------------------------------------
# vech primitives
# ---------------------------------------------------------------------------

def vech_size(n: int) -> int:
    return n * (n + 1) // 2


def vech_dim(m: int) -> int:
    """Matrix dimension N such that N(N+1)/2 == m."""
    n = int(round((math.isqrt(8 * m + 1) - 1) / 2))
    if vech_size(n) != m:
        raise DimensionError(f"{m} is not a triangular number N(N+1)/2")
    return n


def vech_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column index arrays of the vech order for an n x n matrix."""
    # triu_indices walks the upper triangle row by row; swapping the roles
    # gives the lower triangle column by column.
    cols, rows = np.triu_indices(n)
    return rows, cols


def vech_diag_positions(n: int) -> np.ndarray:
    """Positions of the diagonal entries inside a vech vector."""
    rows, cols = vech_indices(n)
    return np.flatnonzero(rows == cols)


def check_symmetric(m: np.ndarray, rtol: float = SYMMETRY_RTOL, name: str = "matrix") -> None:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    diff = np.abs(m - m.T)
    scale = max(float(np.max(np.abs(m))) if m.size else 0.0, 1.0e-300)
    worst = np.unravel_index(np.argmax(diff), diff.shape) if m.size else (0, 0)
    if m.size and diff[worst] > rtol * scale:
        i, j = (int(k) for k in worst)
        raise ValidationError(
            f"{name} is not symmetric: entry ({i},{j})={m[i, j]!r} vs "
            f"({j},{i})={m[j, i]!r}"
        )


def vech(m) -> np.ndarray:
    """Half-vectorize a symmetric matrix (lower triangle, column-major)."""
    m = np.asarray(m, dtype=float)
    check_symmetric(m)
    rows, cols = vech_indices(m.shape[0])
    return m[rows, cols].copy()


def unvech(v, n: int | None = None) -> np.ndarray:
    """Inverse of :func:`vech`; ``n`` is inferred when omitted."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"vech vector must be 1-d, got shape {v.shape}")
    if n is None:
        n = vech_dim(v.size)
    if v.size != vech_size(n):
        raise DimensionError(f"vech length {v.size} does not match N={n} (expected {vech_size(n)})")
    rows, cols = vech_indices(n)
    out = np.empty((n, n))
    out[rows, cols] = v
    out[cols, rows] = v
    return out


def vech_many(mats: np.ndarray) -> np.ndarray:
    """vech applied along the leading axis of a (T, N, N) stack (no symmetry check)."""
    mats = np.asarray(mats, dtype=float)
    rows, cols = vech_indices(mats.shape[-1])
    return mats[..., rows, cols]


def unvech_many(vs: np.ndarray, n: int | None = None) -> np.ndarray:
    vs = np.asarray(vs, dtype=float)
    if n is None:
        n = vech_dim(vs.shape[-1])
    if vs.shape[-1] != vech_size(n):
        raise DimensionError(f"vech length {vs.shape[-1]} does not match N={n}")
    rows, cols = vech_indices(n)
    out = np.empty(vs.shape[:-1] + (n, n))
    out[..., rows, cols] = vs
    out[..., cols, rows] = vs
    return out


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

def _as_dates(dates) -> np.ndarray:
    return np.asarray(dates, dtype="datetime64[D]")


def _check_dates(dates: np.ndarray) -> None:
    if dates.ndim != 1:
        raise DimensionError("dates must be one-dimensional")
    if dates.size > 1 and not np.all(dates[1:] > dates[:-1]):
        bad = int(np.flatnonzero(~(dates[1:] > dates[:-1]))[0]) + 1
        raise ValidationError(f"dates must be strictly increasing (index {bad}: {dates[bad]})")


@dataclass(frozen=True)
class CovPanel:
    """Dated sequence of realized covariance matrices stored as vech rows."""

    dates: np.ndarray
    assets: tuple
    mats: np.ndarray  # (T, N(N+1)/2)

    def __post_init__(self):
        dates = _as_dates(self.dates)
        mats = np.asarray(self.mats, dtype=float)
        assets = tuple(str(a) for a in self.assets)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "mats", mats)
        object.__setattr__(self, "assets", assets)
        _check_dates(dates)
        if mats.ndim != 2 or mats.shape[0] != dates.size:
            raise DimensionError(f"mats must have shape (T, M) with T={dates.size}, got {mats.shape}")
        if mats.shape[1] != vech_size(len(assets)):
            raise DimensionError(
                f"vech width {mats.shape[1]} does not match N={len(assets)} assets"
            )
        diag = mats[:, vech_diag_positions(len(assets))]
        if np.any(diag < 0):
            t, i = np.argwhere(diag < 0)[0]
            raise ValidationError(f"negative variance on day {t} for asset {assets[i]}")

    @property
    def n(self) -> int:
        return len(self.assets)

    @property
    def t(self) -> int:
        return self.dates.size

    def __len__(self):
        return self.dates.size

    def matrix(self, t: int) -> np.ndarray:
        return unvech(self.mats[t], self.n)

    def matrices(self) -> np.ndarray:
        """All days as a (T, N, N) array."""
        return unvech_many(self.mats, self.n)

    @classmethod
    def from_matrices(cls, dates, assets, matrices) -> "CovPanel":
        matrices = np.asarray(matrices, dtype=float)
        for t in range(matrices.shape[0]):
            check_symmetric(matrices[t], name=f"matrix on day {t}")
        return cls(dates, assets, vech_many(matrices))

    def slice(self, start: int, stop: int) -> "CovPanel":
        return CovPanel(self.dates[start:stop], self.assets, self.mats[start:stop])


@dataclass(frozen=True)
class ReturnsPanel:
    """Daily simple returns (T x N) and the daily risk-free rate."""

    dates: np.ndarray
    assets: tuple
    returns: np.ndarray
    risk_free: np.ndarray

    def __post_init__(self):
        dates = _as_dates(self.dates)
        returns = np.asarray(self.returns, dtype=float)
        rf = np.asarray(self.risk_free, dtype=float)
        assets = tuple(str(a) for a in self.assets)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "risk_free", rf)
        object.__setattr__(self, "assets", assets)
        _check_dates(dates)
        if returns.shape != (dates.size, len(assets)):
            raise DimensionError(f"returns must have shape {(dates.size, len(assets))}, got {returns.shape}")
        if rf.shape != (dates.size,):
            raise DimensionError(f"risk_free must have length {dates.size}, got {rf.shape}")
        if not (np.all(np.isfinite(returns)) and np.all(np.isfinite(rf))):
            raise ValidationError("returns panel contains missing or non-finite entries")

    @property
    def n(self) -> int:
        return len(self.assets)

    def __len__(self):
        return self.dates.size


@dataclass(frozen=True)
class CleanReport:
    flagged_days: tuple
    fraction_extreme: np.ndarray
    # audit aid: for each flagged day, the indices of the days averaged in
    sources: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

def clean_panel(panel: CovPanel, sd_thresh: float = 4.0, flag_frac: float = 0.25,
                replace_count: int = 10, min_history: int = 22) -> tuple[CovPanel, CleanReport]:
    """Flag days with many extreme entries and replace them.

    An entry is extreme on day t when it lies more than ``sd_thresh`` sample
    standard deviations from the mean of the same entry over the earlier
    non-flagged days. Flagged days, and their replacements, stay out of these
    expanding statistics: a replacement is an average, so feeding it back
    would shrink the standard deviation and flag ever more days.

    A day is only tested once ``min_history`` non-flagged days (at least two)
    precede it. Standard deviations from a handful of days are too noisy to
    judge a 4-sd move, and an early false flag can leave the history stuck. A day is flagged when the fraction of extreme entries
    strictly exceeds ``flag_frac``; it is replaced by the element-wise mean
    of the nearest ``replace_count`` preceding non-flagged days (fewer if not
    available).

    Returns
    -------
    cleaned : CovPanel
        New panel; ``panel`` is not modified.
    report : CleanReport
    """
    if panel.t < 2:
        raise ValidationError("clean_panel needs at least 2 days")
    if min_history < 2:
        raise ValidationError(f"min_history must be at least 2, got {min_history}")
    x = panel.mats
    out = x.copy()
    T, M = x.shape
    frac = np.zeros(T)
    flagged: list[int] = []
    good: list[int] = []
    sources: dict[int, tuple] = {}

    # Welford running moments over non-flagged days: exact for constant
    # series, so a flat history never yields spurious deviations.
    mean = np.zeros(M)
    m2 = np.zeros(M)
    count = 0
    for t in range(T):
        row = x[t]
        if count >= min_history:
            sd = np.sqrt(m2 / (count - 1))
            extreme = np.abs(row - mean) > sd_thresh * sd
            frac[t] = np.count_nonzero(extreme) / M
            if frac[t] > flag_frac:
                if not good:
                    raise ValidationError(f"day {t} flagged but no earlier non-flagged day to replace it")
                use = good[-replace_count:][::-1]
                out[t] = np.mean(x[use], axis=0)
                flagged.append(t)
                sources[t] = tuple(use)
        if flagged and flagged[-1] == t:
            continue
        good.append(t)
        count += 1
        delta = row - mean
        mean = mean + delta / count
        m2 = m2 + delta * (row - mean)

    cleaned = CovPanel(panel.dates.copy(), panel.assets, out)
    return cleaned, CleanReport(tuple(flagged), frac, sources)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_sidecar(path: Path, kind: str, assets) -> None:
    meta = {"format": kind, "n": len(assets), "assets": list(assets)}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def _read_sidecar(path: Path, n: int | None = None) -> tuple:
    side = _sidecar(path)
    if not side.exists():
        if n is None:
            raise ParseError(f"missing manifest {side}")
        return tuple(f"A{i}" for i in range(n))
    try:
        meta = json.loads(side.read_text())
        assets = tuple(str(a) for a in meta["assets"])
        declared = int(meta.get("n", len(assets)))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed manifest {side}: {exc}") from exc
    if declared != len(assets) or (n is not None and n != len(assets)):
        raise ParseError(f"manifest {side} lists {len(assets)} assets, expected {n if n is not None else declared}")
    return assets


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _days(dates: np.ndarray) -> np.ndarray:
    return dates.astype("datetime64[D]").astype(np.int64)


def _parse_float(text: str, line: int, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", line, column)
    return value


def _parse_date(text: str, line: int):
    try:
        return np.datetime64(text.strip(), "D")
    except ValueError:
        raise ParseError(f"bad date {text!r}", line, 1) from None


def _check_increasing(dates: list, line_offset: int = 2) -> None:
    for k in range(1, len(dates)):
        if not dates[k] > dates[k - 1]:
            raise ParseError(f"dates not strictly increasing: {dates[k]} after {dates[k - 1]}", k + line_offset, 1)


def save_panel_csv(panel: CovPanel, path) -> None:
    path = Path(path)
    m = panel.mats.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + [f"v{k + 1}" for k in range(m)])
        for d, row in zip(panel.dates, panel.mats):
            w.writerow([str(d)] + [_fmt(x) for x in row])
    _write_sidecar(path, "covpanel", panel.assets)


def load_panel_csv(path) -> CovPanel:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        m = len(header) - 1
        if header[0] != "date" or m < 1 or header[1:] != [f"v{k + 1}" for k in range(m)]:
            raise ParseError("malformed header, expected date,v1,...,vM", 1)
        try:
            n = vech_dim(m)
        except DimensionError:
            raise ParseError(f"{m} value columns is not N(N+1)/2 for any N", 1) from None
        dates, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != m + 1:
                raise ParseError(f"expected {m + 1} fields, got {len(rec)}", lineno)
            dates.append(_parse_date(rec[0], lineno))
            rows.append([_parse_float(v, lineno, c) for c, v in enumerate(rec[1:], start=2)])
    _check_increasing(dates)
    assets = _read_sidecar(path, n)
    mats = np.array(rows, dtype=float).reshape(len(rows), m)
    return CovPanel(np.array(dates, dtype="datetime64[D]"), assets, mats)


def save_panel_binary(panel: CovPanel, path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_COV_MAGIC)
        fh.write(struct.pack("<QQ", panel.n, panel.t))
        fh.write(_days(panel.dates).astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(panel.mats, dtype="<f8").tobytes())
    _write_sidecar(path, "covpanel", panel.assets)


def load_panel_binary(path) -> CovPanel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _COV_MAGIC:
        raise ParseError(f"{path}: bad magic bytes {raw[:4]!r}")
    if len(raw) < 20:
        raise ParseError(f"{path}: truncated header")
    n, t = struct.unpack_from("<QQ", raw, 4)
    m = vech_size(n)
    expected = 20 + 8 * t + 8 * t * m
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for N={n}, T={t}, got {len(raw)}")
    days = np.frombuffer(raw, dtype="<i8", count=t, offset=20)
    mats = np.frombuffer(raw, dtype="<f8", count=t * m, offset=20 + 8 * t).reshape(t, m).astype(float)
    if not np.all(np.isfinite(mats)):
        bad = np.argwhere(~np.isfinite(mats))[0]
        raise ParseError(f"{path}: non-finite value on day {bad[0]}, entry {bad[1]}")
    dates = days.astype("datetime64[D]")
    if t > 1 and not np.all(dates[1:] > dates[:-1]):
        raise ParseError(f"{path}: dates not strictly increasing")
    return CovPanel(dates, _read_sidecar(path, n), mats)


def save_returns_csv(panel: ReturnsPanel, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "risk_free", *panel.assets])
        for d, rf, row in zip(panel.dates, panel.risk_free, panel.returns):
            w.writerow([str(d), _fmt(rf)] + [_fmt(x) for x in row])


def load_returns_csv(path) -> ReturnsPanel:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if header[:2] != ["date", "risk_free"] or len(header) < 3:
            raise ParseError("malformed header, expected date,risk_free,<assets...>", 1)
        assets = tuple(header[2:])
        width = len(header)
        dates, rf, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise ParseError(f"expected {width} fields, got {len(rec)}", lineno)
            dates.append(_parse_date(rec[0], lineno))
            rf.append(_parse_float(rec[1], lineno, 2))
            rows.append([_parse_float(v, lineno, c) for c, v in enumerate(rec[2:], start=3)])
    _check_increasing(dates)
    return ReturnsPanel(np.array(dates, dtype="datetime64[D]"), assets,
                        np.array(rows, dtype=float).reshape(len(rows), len(assets)), np.array(rf))


def save_returns_binary(panel: ReturnsPanel, path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_RET_MAGIC)
        fh.write(struct.pack("<QQ", panel.n, len(panel)))
        fh.write(_days(panel.dates).astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(panel.returns, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(panel.risk_free, dtype="<f8").tobytes())
    _write_sidecar(path, "returns", panel.assets)


def load_returns_binary(path) -> ReturnsPanel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _RET_MAGIC or len(raw) < 20:
        raise ParseError(f"{path}: bad magic bytes or truncated header")
    n, t = struct.unpack_from("<QQ", raw, 4)
    expected = 20 + 8 * t + 8 * t * n + 8 * t
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for N={n}, T={t}, got {len(raw)}")
    days = np.frombuffer(raw, dtype="<i8", count=t, offset=20)
    off = 20 + 8 * t
    returns = np.frombuffer(raw, dtype="<f8", count=t * n, offset=off).reshape(t, n).astype(float)
    rf = np.frombuffer(raw, dtype="<f8", count=t, offset=off + 8 * t * n).astype(float)
    if not (np.all(np.isfinite(returns)) and np.all(np.isfinite(rf))):
        raise ParseError(f"{path}: non-finite values")
    dates = days.astype("datetime64[D]")
    if t > 1 and not np.all(dates[1:] > dates[:-1]):
        raise ParseError(f"{path}: dates not strictly increasing")
    return ReturnsPanel(dates, _read_sidecar(path, n), returns, rf)


def _is_csv(path: Path) -> bool:
    return path.suffix.lower() == ".csv"


def save_panel(panel: CovPanel, path) -> None:
    """Write a covariance panel; ``.csv`` selects CSV, anything else binary."""
    path = Path(path)
    (save_panel_csv if _is_csv(path) else save_panel_binary)(panel, path)


def load_panel(path) -> CovPanel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"panel file not found: {path}")
    return (load_panel_csv if _is_csv(path) else load_panel_binary)(path)


def save_returns(panel: ReturnsPanel, path) -> None:
    path = Path(path)
    (save_returns_csv if _is_csv(path) else save_returns_binary)(panel, path)


def load_returns(path) -> ReturnsPanel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"returns file not found: {path}")
    return (load_returns_csv if _is_csv(path) else load_returns_binary)(path)
