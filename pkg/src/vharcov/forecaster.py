"""One-step-ahead covariance forecasts and rolling-window orchestration.

The full model forecasts the three pieces of the factor decomposition
separately and recombines them::

    Sigma_hat = B_hat' Sigma_f_hat B_hat + blockdiag(Sigma_eps_hat^1..S)

* factor covariance: HAR system on vech(Sigma_f) (or vech(log Sigma_f)),
  one penalized regression per unique entry;
* loadings: one scalar HAR per entry of B, fitted by OLS;
* residual blocks: each unique entry of a sector block regressed on the
  block's own variances of the previous day.

Benchmarks: random walk, block random walk (factor decomposition of the last
matrix with the residual truncated to sector blocks) and EWMA on returns.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import har_lasso as hl
from .errors import ConfigError, DimensionError, InsufficientHistoryError, ValidationError
from .factor_model import (FactorSpec, SectorAssignment, block_assemble, block_mask,
                           decompose_panel)
from .panel_io import CovPanel, ReturnsPanel, unvech, unvech_many, vech_indices, vech_many
from .transforms import matrix_exp, matrix_log, psd_project, symmetrize

log = logging.getLogger(__name__)

VHAR, FHAR, RW, BLOCK_RW, EWMA = "vhar", "fhar", "rw", "block_rw", "ewma"
MODEL_KINDS = (VHAR, FHAR, RW, BLOCK_RW, EWMA)
HISTORY_EXTRA = 22  # days needed before the first HAR regression row
EWMA_LAMBDA = 0.96
EWMA_SEED_DAYS = 50


@dataclass(frozen=True)
class ModelConfig:
    n_factors: int = 3
    use_log_matrix: bool = True
    estimator: str = hl.LASSO
    window: int = 1000
    har_spans: tuple = hl.HAR_SPANS
    psd_floor: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "estimator", self.estimator.upper())
        object.__setattr__(self, "har_spans", tuple(int(s) for s in self.har_spans))
        if self.n_factors not in (1, 3, 5, 7):
            raise ConfigError(f"n_factors must be one of 1, 3, 5, 7 (got {self.n_factors})")
        if self.estimator not in (hl.LASSO, hl.ADALASSO):
            raise ConfigError(f"estimator must be LASSO or ADALASSO (got {self.estimator})")
        if self.window < max(self.har_spans) + 10:
            raise ConfigError(f"window must be at least {max(self.har_spans) + 10}")
        if self.psd_floor < 0:
            raise ConfigError("psd_floor must be non-negative")


@dataclass(frozen=True)
class FitRecord:
    """Summary of one estimated equation on one forecast day."""

    date: np.datetime64
    group: str          # "factor" or "block<s>"
    equation: int       # position in the vech of the target matrix
    klass: str          # "variance" or "covariance"
    n_active: int
    max_predictors: int
    lam: float
    bic: float
    active: tuple


@dataclass
class ForecastSet:
    dates: np.ndarray
    sigma_hat: np.ndarray             # (T_oos, N, N)
    kind: str = VHAR
    assets: tuple = ()
    components: list | None = None    # per day (sigma_f_hat, b_hat, eps_hat)
    fits: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.dates.size

    def as_panel(self) -> CovPanel:
        return CovPanel(self.dates, self.assets, vech_many(self.sigma_hat))


def _equation_classes(n: int) -> list[str]:
    rows, cols = vech_indices(n)
    return ["variance" if r == c else "covariance" for r, c in zip(rows, cols)]


def _records(date, group, fits, n, max_predictors) -> list[FitRecord]:
    classes = _equation_classes(n)
    return [FitRecord(date, group, e, classes[e], f.n_active, max_predictors, f.lam, f.bic, f.active)
            for e, f in enumerate(fits)]


# ---------------------------------------------------------------------------
# factor covariance
# ---------------------------------------------------------------------------

def _har_predict(reg_rows: np.ndarray, y_rows: np.ndarray, z_last: np.ndarray, estimator: str):
    Z = np.column_stack([np.ones(reg_rows.shape[0]), reg_rows])
    fits = hl.fit_many(y_rows, Z, estimator)
    z = np.concatenate([[1.0], z_last])
    return np.array([f.intercept + f.coefs @ z[1:] for f in fits]), fits


def _factor_series(sigma_f: np.ndarray, use_log: bool) -> np.ndarray:
    return vech_many(matrix_log(sigma_f) if use_log else sigma_f)


def _factor_from_prediction(pred: np.ndarray, k: int, use_log: bool) -> np.ndarray:
    mat = unvech(pred, k)
    return matrix_exp(mat) if use_log else psd_project(mat, 0.0)


def forecast_factor_cov(sigma_f_window, config: ModelConfig, date=None):
    """Forecast the next factor covariance from a (T, K, K) window.

    Returns ``(sigma_f_hat, fit_records)``. With ``use_log_matrix`` the HAR
    system runs on vech(log Sigma_f) and the forecast is mapped back with the
    matrix exponential, so it is positive definite.
    """
    sf = np.asarray(sigma_f_window, dtype=float)
    if sf.ndim != 3 or sf.shape[1] != sf.shape[2]:
        raise DimensionError(f"expected a (T, K, K) window, got {sf.shape}")
    spans = config.har_spans
    if sf.shape[0] < max(spans) + 1:
        raise InsufficientHistoryError(f"factor window needs at least {max(spans) + 1} days")
    k = sf.shape[1]
    series = _factor_series(sf, config.use_log_matrix)
    reg, off = hl.har_regressors(series, spans)
    pred, fits = _har_predict(reg[:-1], series[off + 1:], reg[-1], config.estimator)
    return (_factor_from_prediction(pred, k, config.use_log_matrix),
            _records(date, "factor", fits, k, reg.shape[1]))


# ---------------------------------------------------------------------------
# loadings
# ---------------------------------------------------------------------------

def _beta_predict(reg_rows: np.ndarray, y_rows: np.ndarray, z_last: np.ndarray, last: np.ndarray, n_series: int):
    """OLS HAR per series. ``reg_rows`` is (n, 3*S) laid out day/week/month blocks."""
    n = reg_rows.shape[0]
    nspan = reg_rows.shape[1] // n_series
    X = reg_rows.reshape(n, nspan, n_series).transpose(2, 0, 1)  # (S, n, nspan)
    Z = np.concatenate([np.ones((n_series, n, 1)), X], axis=2)
    gamma, ok = hl.ols_batch(y_rows.T, Z)
    zl = z_last.reshape(nspan, n_series).T
    pred = gamma[:, 0] + np.einsum("sp,sp->s", gamma[:, 1:], zl)
    ok &= np.isfinite(pred)
    return np.where(ok, pred, last), ~ok


def forecast_betas(b_window, config: ModelConfig):
    """Forecast each loading with its own HAR regression estimated by OLS.

    Returns ``(b_hat, fallback)``; ``fallback`` marks series whose regression
    could not be solved and that repeat their last value instead.
    """
    b = np.asarray(b_window, dtype=float)
    if b.ndim != 3:
        raise DimensionError(f"expected a (T, K, N) window, got {b.shape}")
    spans = config.har_spans
    if b.shape[0] < max(spans) + 1:
        raise InsufficientHistoryError(f"beta window needs at least {max(spans) + 1} days")
    T, k, n = b.shape
    series = b.reshape(T, k * n)
    reg, off = hl.har_regressors(series, spans)
    pred, fb = _beta_predict(reg[:-1], series[off + 1:], reg[-1], series[-1], k * n)
    return pred.reshape(k, n), fb.reshape(k, n)


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

def _block_predict(vech_rows: np.ndarray, diag_rows: np.ndarray, estimator: str, psd_floor: float):
    """Regress vech(block)_t on (1, diag(block)_{t-1}); forecast from the last day."""
    ns = diag_rows.shape[1]
    Z = np.column_stack([np.ones(diag_rows.shape[0] - 1), diag_rows[:-1]])
    fits = hl.fit_many(vech_rows[1:], Z, estimator)
    z = diag_rows[-1]
    pred = np.array([f.intercept + f.coefs @ z for f in fits])
    blk = unvech(pred, ns)
    scale = max(float(np.mean(np.diag(blk))), 0.0)
    out = psd_project(blk, psd_floor * scale)
    return out, fits, float(np.linalg.norm(out - blk))


def forecast_residual_blocks(block_windows, config: ModelConfig, date=None):
    """Forecast every sector block of the residual covariance.

    ``block_windows`` is a sequence of (T, N_s, N_s) arrays. Each block only
    sees its own history. Returns ``(blocks, fit_records, projection_deltas)``.
    """
    blocks, records, deltas = [], [], []
    for s, w in enumerate(block_windows):
        w = np.asarray(w, dtype=float)
        if w.ndim != 3 or w.shape[0] < 2:
            raise InsufficientHistoryError("each residual block window needs at least 2 days")
        ns = w.shape[1]
        blk, fits, delta = _block_predict(vech_many(w), np.diagonal(w, axis1=1, axis2=2),
                                          config.estimator, config.psd_floor)
        blocks.append(blk)
        records.extend(_records(date, f"block{s}", fits, ns, ns))
        deltas.append(delta)
    return blocks, records, deltas


# ---------------------------------------------------------------------------
# assembly and benchmarks
# ---------------------------------------------------------------------------

def assemble(sigma_f_hat, b_hat, eps_block_hats, sectors: SectorAssignment, psd_floor: float = 1e-8):
    """Combine component forecasts into the full covariance forecast.

    Returns ``(sigma_hat, projection_delta)`` where the delta is the Frobenius
    norm of the final eigenvalue repair (zero when none was needed).
    """
    sf = np.asarray(sigma_f_hat, dtype=float)
    b = np.asarray(b_hat, dtype=float)
    if b.shape != (sf.shape[0], sectors.n):
        raise DimensionError(f"loadings {b.shape} do not match K={sf.shape[0]}, N={sectors.n}")
    if len(eps_block_hats) != sectors.n_sectors:
        raise DimensionError(f"{len(eps_block_hats)} residual blocks for {sectors.n_sectors} sectors")
    raw = symmetrize(b.T @ sf @ b + block_assemble(list(eps_block_hats), sectors))
    floor = psd_floor * max(float(np.mean(np.diag(raw))), 0.0)
    out = psd_project(raw, floor)
    return out, float(np.linalg.norm(out - raw))


def rw_forecast(window) -> np.ndarray:
    """Random walk: tomorrow equals the last observed matrix."""
    w = np.asarray(window, dtype=float)
    return w[-1].copy()


def block_rw_forecast(sigma_last, spec: FactorSpec, sectors: SectorAssignment, psd_floor: float = 1e-8,
                      decomposition=None):
    """Last matrix with its factor residual truncated to sector blocks.

    Equivalent to ``B'Sigma_f B + blockdiag(Sigma_eps)`` computed from the
    last day, written as ``Sigma - offblock(Sigma_eps)`` so that a residual
    that is already block diagonal gives back the input bit for bit.
    Returns ``(forecast, projection_delta)``.
    """
    sigma = np.asarray(sigma_last, dtype=float)
    if decomposition is None:
        _, _, eps = decompose_panel(sigma[None], spec)
        eps = eps[0]
    else:
        eps = decomposition
    raw = symmetrize(sigma - np.where(block_mask(sectors), 0.0, eps))
    floor = psd_floor * max(float(np.mean(np.diag(raw))), 0.0)
    out = psd_project(raw, floor)
    return out, float(np.linalg.norm(out - raw))


def ewma_forecast(returns, lam: float = EWMA_LAMBDA, seed_days: int = EWMA_SEED_DAYS, init=None) -> np.ndarray:
    """RiskMetrics recursion ``S_t = lam S_{t-1} + (1 - lam) r_t r_t'``.

    Without ``init`` the recursion is seeded with the sample covariance of the
    first ``seed_days`` returns and run over the remaining ones; a shorter
    window is summarized by its own sample covariance. With ``init`` the
    recursion starts from that matrix and runs over every return.
    """
    r = np.asarray(returns, dtype=float)
    if r.ndim != 2 or r.shape[0] < 1:
        raise ValidationError("EWMA needs a non-empty (T, N) return window")
    if init is not None:
        s = np.array(init, dtype=float)
        start = 0
    else:
        seed = r[:seed_days]
        s = np.cov(seed, rowvar=False, ddof=1).reshape(r.shape[1], r.shape[1]) if seed.shape[0] > 1 \
            else np.outer(seed[0], seed[0])
        start = seed.shape[0]
    for t in range(start, r.shape[0]):
        s = lam * s + (1.0 - lam) * np.outer(r[t], r[t])
    return s


# ---------------------------------------------------------------------------
# rolling orchestration
# ---------------------------------------------------------------------------

def n_forecasts(T: int, window: int) -> int:
    return max(T - window - HISTORY_EXTRA, 0)


def factor_panel(panel: CovPanel, spec: FactorSpec) -> CovPanel:
    """Panel of factor covariances ``W' Sigma_t W``."""
    from .factor_model import factor_cov
    sf = factor_cov(panel.matrices(), spec)
    return CovPanel(panel.dates, spec.names, vech_many(sf))


class _Prepared:
    """Per-day quantities for the whole panel (each depends on its own day only)."""

    def __init__(self, panel: CovPanel, config: ModelConfig, spec: FactorSpec | None,
                 sectors: SectorAssignment | None, kind: str):
        self.mats = panel.matrices()
        self.kind = kind
        if kind in (VHAR, FHAR, BLOCK_RW):
            if spec is None:
                raise ValidationError(f"model {kind!r} needs a factor specification")
            sub = spec.subset(config.n_factors)
            if sub.n != panel.n:
                raise DimensionError(f"factor weights cover {sub.n} assets, panel has {panel.n}")
            self.spec = sub
            self.sf, self.b, self.eps = decompose_panel(self.mats, sub)
        if kind in (VHAR, BLOCK_RW):
            if sectors is None:
                raise ValidationError(f"model {kind!r} needs a sector assignment")
            if sectors.n != panel.n:
                raise DimensionError(f"sector table covers {sectors.n} assets, panel has {panel.n}")
            self.sectors = sectors
        if kind in (VHAR, FHAR):
            self.k = self.sf.shape[1]
            self.fseries = _factor_series(self.sf, config.use_log_matrix)
            self.freg, _ = hl.har_regressors(self.fseries, config.har_spans)
        if kind == VHAR:
            T, k, n = self.b.shape
            self.bseries = self.b.reshape(T, k * n)
            self.breg, _ = hl.har_regressors(self.bseries, config.har_spans)
            self.blocks = []
            for idx in sectors.blocks():
                blk = self.eps[:, idx[:, None], idx[None, :]]
                self.blocks.append((vech_many(blk), np.diagonal(blk, axis1=1, axis2=2).copy()))


def _one_day(prep: _Prepared, t: int, config: ModelConfig, returns: np.ndarray | None, date, keep_components: bool):
    W = config.window
    lo = t - W - HISTORY_EXTRA
    info = {}
    records = []
    comp = None
    if prep.kind == RW:
        return rw_forecast(prep.mats[lo:t]), records, info, comp
    if prep.kind == EWMA:
        return ewma_forecast(returns[lo:t]), records, info, comp
    if prep.kind == BLOCK_RW:
        out, delta = block_rw_forecast(prep.mats[t - 1], prep.spec, prep.sectors, config.psd_floor,
                                       decomposition=prep.eps[t - 1])
        info["projection_delta"] = delta
        return out, records, info, comp

    # HAR rows: regressor on day u predicts day u+1, u in [lo+off, t-2]
    off = max(config.har_spans) - 1
    rows = slice(lo, t - 1 - off)  # regressor array index k is day off + k
    pred, fits = _har_predict(prep.freg[rows], prep.fseries[lo + off + 1:t], prep.freg[t - 1 - off],
                              config.estimator)
    sf_hat = _factor_from_prediction(pred, prep.k, config.use_log_matrix)
    records.extend(_records(date, "factor", fits, prep.k, prep.freg.shape[1]))
    if prep.kind == FHAR:
        return sf_hat, records, info, (sf_hat, None, None) if keep_components else None

    n_series = prep.bseries.shape[1]
    bpred, fb = _beta_predict(prep.breg[rows], prep.bseries[lo + off + 1:t], prep.breg[t - 1 - off],
                              prep.bseries[t - 1], n_series)
    b_hat = bpred.reshape(prep.b.shape[1], prep.b.shape[2])
    eps_blocks = []
    deltas = []
    for s, (vrows, drows) in enumerate(prep.blocks):
        blk, bfits, delta = _block_predict(vrows[lo:t], drows[lo:t], config.estimator, config.psd_floor)
        eps_blocks.append(blk)
        deltas.append(delta)
        records.extend(_records(date, f"block{s}", bfits, drows.shape[1], drows.shape[1]))
    sigma_hat, delta = assemble(sf_hat, b_hat, eps_blocks, prep.sectors, config.psd_floor)
    info["projection_delta"] = delta
    info["block_projection_delta"] = float(np.sum(deltas))
    info["beta_fallbacks"] = int(np.count_nonzero(fb))
    if keep_components:
        comp = (sf_hat, b_hat, block_assemble(eps_blocks, prep.sectors))
    return sigma_hat, records, info, comp


def rolling_forecast(panel: CovPanel, config: ModelConfig, kind: str = VHAR, spec: FactorSpec | None = None,
                     sectors: SectorAssignment | None = None, returns: ReturnsPanel | None = None,
                     keep_components: bool = False, threads: int = 1) -> ForecastSet:
    """Rolling one-step-ahead forecasts over the panel.

    The forecast for day ``t`` uses days ``t - window - 22 .. t - 1`` (so each
    HAR regression has exactly ``window`` rows). Forecast days run from
    ``window + 22`` to ``T - 1``: ``T - window - 22`` forecasts in total.

    ``kind`` is one of ``vhar`` (full model), ``fhar`` (factor covariance
    only; forecasts are K x K), ``rw``, ``block_rw`` or ``ewma`` (needs
    ``returns`` on the panel dates).
    """
    if kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    T = panel.t
    n_oos = n_forecasts(T, config.window)
    if n_oos < 1:
        raise InsufficientHistoryError(
            f"panel has {T} days; need more than window + {HISTORY_EXTRA} = {config.window + HISTORY_EXTRA}")
    rets = None
    if kind == EWMA:
        if returns is None:
            raise ValidationError("EWMA forecasts need a returns panel")
        pos = np.searchsorted(returns.dates, panel.dates)
        if np.any(pos >= len(returns)) or np.any(returns.dates[np.minimum(pos, len(returns) - 1)] != panel.dates):
            raise ValidationError("returns panel must cover every covariance panel date")
        rets = returns.returns[pos]
    prep = _Prepared(panel, config, spec, sectors, kind)
    days = list(range(config.window + HISTORY_EXTRA, T))

    def run(t):
        return _one_day(prep, t, config, rets, panel.dates[t], keep_components)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, days))
    else:
        results = [run(t) for t in days]

    sigma_hat = np.stack([r[0] for r in results])
    fits = [rec for r in results for rec in r[1]]
    diag = {}
    for key in ("projection_delta", "block_projection_delta", "beta_fallbacks"):
        vals = [r[2][key] for r in results if key in r[2]]
        if vals:
            diag[key] = np.array(vals)
    if "projection_delta" in diag and np.any(diag["projection_delta"] > 0):
        log.info("%s: eigenvalue repair applied on %d of %d days", kind,
                 int(np.count_nonzero(diag["projection_delta"])), len(days))
    assets = prep.spec.names if kind == FHAR else panel.assets
    comps = [r[3] for r in results] if keep_components else None
    return ForecastSet(panel.dates[days].copy(), sigma_hat, kind, assets, comps, fits, diag)
