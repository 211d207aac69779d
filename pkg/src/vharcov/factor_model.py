"""Factor decomposition of covariance matrices and sector-block utilities.

Each day's covariance is split as ``Sigma = B' Sigma_f B + Sigma_eps`` where
``Sigma_f = W' Sigma W`` is the covariance of the factor portfolios with
weights ``W`` (N x K) and ``B = Sigma_f^{-1} W' Sigma`` (K x N) holds the
regression loadings of the assets on the factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericError, ParseError, ValidationError
from .panel_io import CovPanel
from .transforms import symmetrize

# Reference stock counts per SIC sector; used to split synthetic
# universes into sectors of realistic relative size.
SIC_SECTORS = (
    ("Consumer Non-Durables", 31),
    ("Consumer Durables", 8),
    ("Manufacturing", 65),
    ("Oil, Gas, and Coal Extraction", 32),
    ("Business Equipment", 61),
    ("Telecommunications", 10),
    ("Wholesale and Retail", 45),
    ("Health Care, Medical Equipments, and Drugs", 26),
    ("Utilities", 36),
    ("Others", 116),
)

FACTOR_NAMES = ("MKT", "SMB", "HML", "GP", "INV", "AG", "ACC")


@dataclass(frozen=True)
class FactorSpec:
    weights: np.ndarray  # (N, K)
    names: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise DimensionError(f"factor weights must be N x K, got shape {w.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.names) != w.shape[1]:
            raise DimensionError(f"{len(self.names)} names for {w.shape[1]} factor columns")
        if not np.all(np.isfinite(w)):
            raise ValidationError("factor weights must be finite")
        zero = np.flatnonzero(~np.any(w != 0, axis=0))
        if zero.size:
            raise ValidationError(f"factor column {self.names[zero[0]]!r} is all zero")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    def subset(self, k: int) -> "FactorSpec":
        """First ``k`` factors (1F, 3F, 5F and 7F are nested)."""
        return FactorSpec(self.weights[:, :k], self.names[:k])


@dataclass(frozen=True)
class SectorAssignment:
    sector_of: np.ndarray  # (N,) ints in 0..S-1
    sector_names: tuple

    def __post_init__(self):
        s = np.asarray(self.sector_of)
        if s.ndim != 1 or not np.issubdtype(s.dtype, np.integer):
            raise ValidationError("sector_of must be a 1-d integer array")
        names = tuple(str(x) for x in self.sector_names)
        if len(names) < 1:
            raise ValidationError("need at least one sector")
        if s.size and (s.min() < 0 or s.max() >= len(names)):
            raise ValidationError("sector index out of range")
        object.__setattr__(self, "sector_of", s.astype(np.int64))
        object.__setattr__(self, "sector_names", names)

    @property
    def n_sectors(self) -> int:
        return len(self.sector_names)

    @property
    def n(self) -> int:
        return self.sector_of.size

    def members(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.sector_of == s)

    def blocks(self) -> list[np.ndarray]:
        return [self.members(s) for s in range(self.n_sectors)]

    @classmethod
    def from_sizes(cls, sizes, names=None) -> "SectorAssignment":
        sizes = [int(x) for x in sizes]
        if names is None:
            names = [f"S{s}" for s in range(len(sizes))]
        return cls(np.repeat(np.arange(len(sizes)), sizes), tuple(names))


def proportional_sector_sizes(n: int, n_sectors: int = 10) -> list[int]:
    """Split ``n`` assets into sectors proportional to the SIC reference counts.

    With fewer than ten sectors the largest sectors of the table are kept.
    Largest-remainder rounding; empty sectors borrow from the largest one.
    """
    if n_sectors < 1 or n_sectors > len(SIC_SECTORS):
        raise ValidationError(f"n_sectors must be in 1..{len(SIC_SECTORS)}")
    if n < n_sectors:
        raise ValidationError("need at least one asset per sector")
    ranked = sorted(range(len(SIC_SECTORS)), key=lambda i: -SIC_SECTORS[i][1])
    keep = sorted(ranked[:n_sectors])
    counts = np.array([SIC_SECTORS[i][1] for i in keep], dtype=float)
    raw = counts / counts.sum() * n
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: n - base.sum()]] += 1
    while base.min() < 1:
        base[np.argmax(base)] -= 1
        base[np.argmin(base)] += 1
    return [int(b) for b in base]


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Decomposition:
    sigma_f: np.ndarray    # (K, K)
    loadings: np.ndarray   # (K, N)
    sigma_eps: np.ndarray  # (N, N)

    def reconstruct(self) -> np.ndarray:
        return self.loadings.T @ self.sigma_f @ self.loadings + self.sigma_eps


def _check_dims(sigma: np.ndarray, spec: FactorSpec) -> None:
    if sigma.shape[-2:] != (spec.n, spec.n):
        raise DimensionError(f"covariance shape {sigma.shape} does not match N={spec.n} factor weights")


def factor_cov(sigma, spec: FactorSpec) -> np.ndarray:
    """Factor covariance ``W' Sigma W`` (stack-aware over leading axes)."""
    sigma = np.asarray(sigma, dtype=float)
    _check_dims(sigma, spec)
    w = spec.weights
    return symmetrize(w.T @ sigma @ w)


def factor_loadings(sigma, sigma_f, spec: FactorSpec, ridge: float = 1e-10) -> np.ndarray:
    """Loadings ``B`` solving ``Sigma_f B = W' Sigma`` by Cholesky.

    If the plain factorization fails, ``ridge * trace(Sigma_f) / K`` is added
    to the diagonal and the solve retried once.
    """
    sigma = np.asarray(sigma, dtype=float)
    sigma_f = np.asarray(sigma_f, dtype=float)
    _check_dims(sigma, spec)
    k = spec.k
    if sigma_f.shape != (k, k):
        raise DimensionError(f"factor covariance must be {k}x{k}, got {sigma_f.shape}")
    rhs = spec.weights.T @ sigma
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(sigma_f, lower=True), rhs)
    except (np.linalg.LinAlgError, ValueError):
        pass
    jitter = ridge * np.trace(sigma_f) / k
    try:
        return scipy.linalg.cho_solve(
            scipy.linalg.cho_factor(sigma_f + jitter * np.eye(k), lower=True), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"factor covariance is numerically singular: {exc}") from exc


def residual_cov(sigma, sigma_f, loadings) -> np.ndarray:
    """``Sigma - B' Sigma_f B`` (may be indefinite)."""
    sigma = np.asarray(sigma, dtype=float)
    sigma_f = np.asarray(sigma_f, dtype=float)
    b = np.asarray(loadings, dtype=float)
    if b.shape[-1] != sigma.shape[-1] or b.shape[-2] != sigma_f.shape[-1]:
        raise DimensionError(f"loadings shape {b.shape} incompatible with {sigma.shape} and {sigma_f.shape}")
    return symmetrize(sigma - b.swapaxes(-1, -2) @ sigma_f @ b)


def decompose(sigma, spec: FactorSpec, ridge: float = 1e-10) -> Decomposition:
    sigma = np.asarray(sigma, dtype=float)
    sf = factor_cov(sigma, spec)
    b = factor_loadings(sigma, sf, spec, ridge)
    return Decomposition(sf, b, residual_cov(sigma, sf, b))


def decompose_panel(matrices: np.ndarray, spec: FactorSpec, ridge: float = 1e-10):
    """Decompose every day of a (T, N, N) stack.

    Returns ``(sigma_f, loadings, sigma_eps)`` stacks of shapes (T, K, K),
    (T, K, N) and (T, N, N). Days are independent of each other.
    """
    matrices = np.asarray(matrices, dtype=float)
    _check_dims(matrices, spec)
    sf = factor_cov(matrices, spec)
    rhs = spec.weights.T @ matrices
    try:
        chol = np.linalg.cholesky(sf)
        b = np.linalg.solve(chol.swapaxes(-1, -2), np.linalg.solve(chol, rhs))
    except np.linalg.LinAlgError:
        b = np.stack([factor_loadings(matrices[t], sf[t], spec, ridge) for t in range(matrices.shape[0])])
    eps = residual_cov(matrices, sf, b)
    return sf, b, eps


# ---------------------------------------------------------------------------
# sector blocks
# ---------------------------------------------------------------------------

def block_extract(sigma_eps, sectors: SectorAssignment) -> list[np.ndarray]:
    """Principal submatrices over each sector's assets (stack-aware)."""
    sigma_eps = np.asarray(sigma_eps, dtype=float)
    if sigma_eps.shape[-1] != sectors.n:
        raise DimensionError(f"matrix of size {sigma_eps.shape[-1]} vs {sectors.n} sector assignments")
    return [sigma_eps[..., idx[:, None], idx[None, :]] for idx in sectors.blocks()]


def block_assemble(blocks, sectors: SectorAssignment) -> np.ndarray:
    """Inverse of :func:`block_extract` for block-diagonal matrices."""
    lead = np.asarray(blocks[0]).shape[:-2]
    out = np.zeros(lead + (sectors.n, sectors.n))
    for idx, blk in zip(sectors.blocks(), blocks):
        out[..., idx[:, None], idx[None, :]] = blk
    return out


def block_mask(sectors: SectorAssignment) -> np.ndarray:
    s = sectors.sector_of
    return s[:, None] == s[None, :]


def block_truncate(sigma_eps, sectors: SectorAssignment) -> np.ndarray:
    """Zero every entry linking assets of different sectors."""
    return np.where(block_mask(sectors), np.asarray(sigma_eps, dtype=float), 0.0)


def block_boundaries(sectors: SectorAssignment) -> list[tuple[str, int, int]]:
    """(name, first, last) asset positions of each sector when contiguous."""
    out = []
    for s, idx in enumerate(sectors.blocks()):
        if idx.size:
            out.append((sectors.sector_names[s], int(idx.min()), int(idx.max())))
    return out


def significance_pattern(panel: CovPanel | np.ndarray, thresh: float = 0.15, frac: float = 1 / 3) -> np.ndarray:
    """Pairs whose correlation exceeds ``thresh`` in absolute value often enough.

    Entry (i, j) is True when ``|rho_ij,t| > thresh`` on at least ``frac * T``
    days. Days where either variance is not positive count as not
    significant but stay in the denominator. The diagonal is False.
    """
    mats = panel.matrices() if isinstance(panel, CovPanel) else np.asarray(panel, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    T, n, _ = mats.shape
    if T < 1:
        raise ValidationError("significance_pattern needs at least one day")
    count = np.zeros((n, n), dtype=np.int64)
    for t in range(T):
        var = np.diagonal(mats[t])
        ok = var > 0
        sd = np.sqrt(np.where(ok, var, 1.0))
        rho = mats[t] / np.outer(sd, sd)
        valid = np.outer(ok, ok)
        count += (valid & (np.abs(rho) > thresh)).astype(np.int64)
    pattern = count >= frac * T
    np.fill_diagonal(pattern, False)
    return pattern


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def save_factor_spec(spec: FactorSpec, assets, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", *spec.names])
        for a, row in zip(assets, spec.weights):
            w.writerow([a] + [format(float(x), ".17g") for x in row])


def load_factor_spec(path) -> tuple[FactorSpec, tuple]:
    """Read ``asset,<factor names...>`` rows; returns a FactorSpec and the asset ids."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"factor spec not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["asset"] or len(rows[0]) < 2:
        raise ParseError("malformed header, expected asset,<factor names...>", 1)
    names = tuple(rows[0][1:])
    assets, weights = [], []
    for lineno, rec in enumerate(rows[1:], start=2):
        if not rec:
            continue
        if len(rec) != len(names) + 1:
            raise ParseError(f"expected {len(names) + 1} fields", lineno)
        assets.append(rec[0])
        try:
            weights.append([float(x) for x in rec[1:]])
        except ValueError:
            raise ParseError("non-numeric weight", lineno) from None
    return FactorSpec(np.array(weights), names), tuple(assets)


def save_sectors(sectors: SectorAssignment, assets, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset", "sector"])
        for a, s in zip(assets, sectors.sector_of):
            w.writerow([a, sectors.sector_names[s]])


def load_sectors(path, assets=None) -> SectorAssignment:
    """Read ``asset,sector`` rows. Sector indices follow first appearance."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sector file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["asset", "sector"]:
        raise ParseError("malformed header, expected asset,sector", 1)
    table = {}
    for lineno, rec in enumerate(rows[1:], start=2):
        if not rec:
            continue
        if len(rec) != 2:
            raise ParseError("expected 2 fields", lineno)
        if rec[0] in table:
            raise ParseError(f"asset {rec[0]!r} assigned twice", lineno)
        table[rec[0]] = rec[1]
    order = list(assets) if assets is not None else list(table)
    missing = [a for a in order if a not in table]
    if missing:
        raise ValidationError(f"assets without sector: {missing[:5]}")
    names: list[str] = []
    idx = []
    for a in order:
        lab = table[a]
        if lab not in names:
            names.append(lab)
        idx.append(names.index(lab))
    return SectorAssignment(np.array(idx, dtype=np.int64), tuple(names))


def save_pattern(pattern: np.ndarray, sectors: SectorAssignment | None, path) -> None:
    """Write significant (i, j) pairs followed by sector boundary rows."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "i", "j", "label"])
        for i, j in np.argwhere(pattern):
            w.writerow(["pair", int(i), int(j), ""])
        if sectors is not None:
            for name, first, last in block_boundaries(sectors):
                w.writerow(["block", first, last, name])
