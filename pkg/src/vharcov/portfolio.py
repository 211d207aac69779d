"""Minimum-variance portfolios and the out-of-sample backtest.

Three constraint sets are supported:

* ``GLOBAL``: budget only, closed form ``Sigma^{-1} 1 / (1' Sigma^{-1} 1)``;
* ``RESTRICTED``: total short exposure at most ``short_cap`` and every
  absolute weight at most ``box``;
* ``LONG_ONLY``: ``0 <= w_i <= box``.

The constrained problems are written in split variables ``w = p - q`` with
``p, q >= 0`` and solved by an operator-splitting (ADMM) iteration of the
OSQP type. Once the iterate has settled, the active set it suggests is
solved exactly as an equality-constrained QP and accepted when that point
satisfies the KKT conditions; this returns weights that meet the
constraints to rounding error.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import AlignmentError, DomainError, InfeasibleError, NumericError, ValidationError
from .forecaster import ForecastSet
from .panel_io import CovPanel, ReturnsPanel
from .transforms import psd_project, symmetrize

log = logging.getLogger(__name__)

GLOBAL, RESTRICTED, LONG_ONLY = "GLOBAL", "RESTRICTED", "LONG_ONLY"
ANNUALIZATION_DAYS = 252
FEAS_TOL = 1e-8

ADMM_EPS = 1e-8
ADMM_MAX_ITER = 200_000
_SIGMA = 1e-6
_ALPHA = 1.6
_CHECK_EVERY = 25


@dataclass(frozen=True)
class ConstraintSet:
    kind: str = GLOBAL
    short_cap: float | None = None
    box: float | None = None

    def __post_init__(self):
        kind = self.kind.upper().replace("-", "_")
        object.__setattr__(self, "kind", kind)
        if kind == GLOBAL:
            if self.short_cap is not None or self.box is not None:
                raise ValidationError("GLOBAL constraints take no caps")
        elif kind == RESTRICTED:
            if self.short_cap is None or self.box is None or self.short_cap <= 0 or self.box <= 0:
                raise ValidationError("RESTRICTED needs positive short_cap and box")
        elif kind == LONG_ONLY:
            if self.short_cap is not None:
                raise ValidationError("LONG_ONLY takes no short cap")
            if self.box is None or self.box <= 0:
                raise ValidationError("LONG_ONLY needs a positive box")
        else:
            raise ValidationError(f"unknown constraint kind {self.kind!r}")

    @classmethod
    def global_(cls) -> "ConstraintSet":
        return cls(GLOBAL)

    @classmethod
    def restricted(cls, short_cap: float = 0.30, box: float = 0.20) -> "ConstraintSet":
        return cls(RESTRICTED, short_cap, box)

    @classmethod
    def long_only(cls, box: float = 0.20) -> "ConstraintSet":
        return cls(LONG_ONLY, None, box)

    @classmethod
    def from_name(cls, name: str) -> "ConstraintSet":
        key = name.upper().replace("-", "_")
        if key == GLOBAL:
            return cls.global_()
        if key == RESTRICTED:
            return cls.restricted()
        if key == LONG_ONLY:
            return cls.long_only()
        raise ValidationError(f"unknown constraint set {name!r}")


@dataclass(frozen=True)
class BacktestConfig:
    rebalance_fraction: float = 1.0
    annualization_days: int = ANNUALIZATION_DAYS

    def __post_init__(self):
        if not 0 < self.rebalance_fraction <= 1:
            raise ValidationError(f"rebalance_fraction must lie in (0, 1], got {self.rebalance_fraction}")
        if self.annualization_days < 1:
            raise ValidationError("annualization_days must be positive")


REPORT_ROWS = (
    ("std_dev", "Standard Deviation (%)"),
    ("lower_partial_std", "Lower Partial Standard Deviation (%)"),
    ("kurtosis", "Kurtosis"),
    ("skewness", "Skewness"),
    ("avg_diversification_ratio", "Average Diversification Ratio"),
    ("avg_max_weight", "Average Max. Weight"),
    ("avg_min_weight", "Average Min. Weight"),
    ("avg_gross_leverage", "Average Gross Leverage"),
    ("proportion_leverage", "Proportion of Leverage (%)"),
    ("avg_turnover", "Average Turnover (%)"),
    ("avg_excess_return", "Average Excess Return (%)"),
    ("cumulative_return", "Cumulative Return (%)"),
    ("sharpe", "Sharpe Ratio"),
)


@dataclass(frozen=True)
class BacktestReport:
    std_dev: float
    lower_partial_std: float
    kurtosis: float
    skewness: float
    avg_diversification_ratio: float
    avg_max_weight: float
    avg_min_weight: float
    avg_gross_leverage: float
    proportion_leverage: float
    avg_turnover: float
    avg_excess_return: float
    cumulative_return: float
    sharpe: float

    def rows(self) -> list[tuple[str, float]]:
        return [(label, getattr(self, name)) for name, label in REPORT_ROWS]


@dataclass
class BacktestResult:
    report: BacktestReport
    dates: np.ndarray
    weights: np.ndarray          # (days, N) weights held over each date
    hold: np.ndarray             # (days, N) drifted weights before rebalancing (row 0 = NaN)
    portfolio_returns: np.ndarray
    skipped_dates: list = field(default_factory=list)
    repaired_days: int = 0
    renormalization: np.ndarray | None = None


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def _cholesky(sigma: np.ndarray):
    try:
        return cho_factor(sigma, lower=True)
    except LinAlgError as exc:
        raise DomainError("covariance forecast is not positive definite; apply psd_project first") from exc


def gmv_weights(sigma_hat) -> np.ndarray:
    """Global minimum-variance weights ``Sigma^{-1} 1 / (1' Sigma^{-1} 1)``."""
    sigma = symmetrize(sigma_hat)
    n = sigma.shape[0]
    if sigma.ndim != 2 or sigma.shape[1] != n:
        raise ValidationError(f"expected a square matrix, got {sigma.shape}")
    scale = np.trace(sigma) / n
    if not scale > 0:
        raise DomainError("covariance forecast has non-positive trace")
    x = cho_solve(_cholesky(sigma / scale), np.ones(n))
    return x / x.sum()


def constraint_violation(w, cons: ConstraintSet) -> float:
    """Largest violation of the budget and the constraint set (0 when feasible)."""
    w = np.asarray(w, dtype=float)
    v = abs(w.sum() - 1.0)
    if cons.kind == RESTRICTED:
        v = max(v, float(np.max(np.abs(w))) - cons.box, float(np.maximum(-w, 0).sum()) - cons.short_cap)
    elif cons.kind == LONG_ONLY:
        v = max(v, float(-w.min()), float(w.max()) - cons.box)
    return max(v, 0.0)


def _objective(sigma, w):
    return float(w @ sigma @ w)


class _Admm:
    """OSQP-style ADMM for ``min x'Px/2 s.t. l <= Ax <= u`` with dense data."""

    def __init__(self, P, A, l, u):
        self.P, self.A, self.l, self.u = P, A, l, u
        self.n, self.m = P.shape[0], A.shape[0]
        self.eq = (u - l) < 1e-12
        self.rho0 = 0.1
        self._set_rho(self.rho0)

    def _set_rho(self, rho):
        self.rho_scalar = float(np.clip(rho, 1e-6, 1e6))
        self.rho = np.where(self.eq, 1e3 * self.rho_scalar, self.rho_scalar)
        K = self.P + _SIGMA * np.eye(self.n) + (self.A.T * self.rho) @ self.A
        self.factor = cho_factor(K, lower=True)

    def run(self, x0, polish, max_iter=ADMM_MAX_ITER, eps=ADMM_EPS):
        A, P = self.A, self.P
        x = x0.copy()
        z = np.clip(A @ x, self.l, self.u)
        y = np.zeros(self.m)
        res = (np.inf, np.inf)
        for it in range(1, max_iter + 1):
            rhs = _SIGMA * x + A.T @ (self.rho * z - y)
            xt = cho_solve(self.factor, rhs)
            zt = A @ xt
            x = _ALPHA * xt + (1 - _ALPHA) * x
            zr = _ALPHA * zt + (1 - _ALPHA) * z
            z_new = np.clip(zr + y / self.rho, self.l, self.u)
            y = y + self.rho * (zr - z_new)
            z = z_new
            if it % _CHECK_EVERY:
                continue
            Ax, Px, Aty = A @ x, P @ x, A.T @ y
            r_prim = float(np.max(np.abs(Ax - z)))
            r_dual = float(np.max(np.abs(Px + Aty)))
            res = (r_prim, r_dual)
            n_prim = max(np.max(np.abs(Ax)), np.max(np.abs(z)))
            n_dual = max(np.max(np.abs(Px)), np.max(np.abs(Aty)))
            if max(r_prim, r_dual) < 1e-4:
                sol = polish(x)
                if sol is not None:
                    return sol, x, it, res
            if r_prim <= eps + eps * n_prim and r_dual <= eps + eps * n_dual:
                return polish(x), x, it, res
            if it % (10 * _CHECK_EVERY) == 0:
                ratio = (r_prim / max(n_prim, 1e-30)) / max(r_dual / max(n_dual, 1e-30), 1e-30)
                new = self.rho_scalar * math.sqrt(ratio)
                if new > 5 * self.rho_scalar or new < self.rho_scalar / 5:
                    self._set_rho(new)
        raise NumericError(f"ADMM did not converge in {max_iter} iterations "
                           f"(primal residual {res[0]:.3e}, dual residual {res[1]:.3e})")


def _polish(sigma, w_bar, cons: ConstraintSet, tau: float):
    """Solve the equality QP implied by the active set of ``w_bar`` and verify KKT.

    Returns the polished weights, or None when the guessed active set is
    wrong (infeasible point or multipliers of the wrong sign).
    """
    n = w_bar.size
    box = cons.box
    fixed = np.full(n, np.nan)
    upper = w_bar >= box - tau
    fixed[upper] = box
    if cons.kind == LONG_ONLY:
        at_zero = w_bar <= tau
        lower = np.zeros(n, dtype=bool)
    else:
        lower = w_bar <= -box + tau
        at_zero = (np.abs(w_bar) <= tau) & ~lower & ~upper
        fixed[lower] = -box
    fixed[at_zero] = 0.0
    free = np.isnan(fixed)
    if not free.any():
        return None
    neg_free = free & (w_bar < 0)
    short_active = (cons.kind == RESTRICTED
                    and np.maximum(-w_bar, 0).sum() >= cons.short_cap - tau * n)
    wx = np.where(free, 0.0, fixed)
    F = np.flatnonzero(free)
    use_mu = short_active and neg_free.any()
    m = F.size + 1 + int(use_mu)
    K = np.zeros((m, m))
    rhs = np.zeros(m)
    K[: F.size, : F.size] = 2.0 * sigma[np.ix_(F, F)]
    K[: F.size, F.size] = -1.0
    K[F.size, : F.size] = 1.0
    rhs[: F.size] = -2.0 * sigma[F] @ wx
    rhs[F.size] = 1.0 - wx.sum()
    if use_mu:
        a = neg_free[F].astype(float)
        K[: F.size, F.size + 1] = -a
        K[F.size + 1, : F.size] = -a   # sum of |w| over free shorts
        rhs[F.size + 1] = cons.short_cap - np.maximum(-wx, 0).sum()
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    w = wx.copy()
    w[F] = sol[: F.size]
    nu = sol[F.size]
    g = 2.0 * sigma @ w - nu        # gradient of the Lagrangian in p
    tol = 1e-9 * (1.0 + np.max(np.abs(2.0 * sigma @ w)))
    # primal checks on the free assets keep their sign
    pos_free = free & ~neg_free
    if np.any(w[pos_free] < -1e-14) or np.any(w[neg_free] > 1e-14):
        return None
    if constraint_violation(w, cons) > 1e-12:
        return None
    if cons.kind == LONG_ONLY:
        ok = np.all(g[at_zero] >= -tol) and np.all(g[upper] <= tol)
        return w if ok else None
    if use_mu:
        mu = sol[F.size + 1]
    elif short_active:
        mu = max(0.0, float(g[at_zero].max()) if at_zero.any() else 0.0)
    else:
        mu = 0.0
    if mu < -tol:
        return None
    gq = mu - g                     # gradient in q
    ok = (np.all(np.abs(g[pos_free]) <= tol) and np.all(np.abs(gq[neg_free]) <= tol)
          and np.all(g[upper] <= tol) and np.all(gq[lower] <= tol)
          and np.all(g[at_zero] >= -tol) and np.all(gq[at_zero] >= -tol)
          and np.all(g[neg_free | lower] >= -tol))
    return w if ok else None


def _repair(w, cons: ConstraintSet) -> np.ndarray:
    """Clip an almost-feasible iterate onto the constraint set."""
    lo = -cons.box if cons.kind == RESTRICTED else 0.0
    w = np.clip(w, lo, cons.box)
    for _ in range(50):
        gap = 1.0 - w.sum()
        if abs(gap) <= 1e-15:
            break
        room = (cons.box - w) if gap > 0 else (w - np.maximum(lo, 0.0))
        room = np.maximum(room, 0.0)
        if room.sum() <= 0:
            break
        w = w + np.sign(gap) * room * min(1.0, abs(gap) / room.sum())
    return w


def constrained_min_var(sigma_hat, cons: ConstraintSet) -> np.ndarray:
    """Minimum-variance weights under a constraint set.

    Raises
    ------
    InfeasibleError
        If ``N * box < 1`` (the budget cannot be met).
    NumericError
        If the iteration does not converge within the iteration cap.
    """
    if cons.kind == GLOBAL:
        return gmv_weights(sigma_hat)
    sigma = symmetrize(sigma_hat)
    n = sigma.shape[0]
    if n * cons.box < 1.0 - 1e-12:
        raise InfeasibleError(f"{n} assets with a {cons.box} cap cannot hold a fully invested portfolio")
    w_gmv = gmv_weights(sigma)
    if constraint_violation(w_gmv, cons) <= 0.0:
        return w_gmv
    scale = np.trace(sigma) / n
    S = sigma / scale

    if cons.kind == LONG_ONLY:
        P = 2.0 * S
        A = np.vstack([np.eye(n), np.ones((1, n))])
        l = np.concatenate([np.zeros(n), [1.0]])
        u = np.concatenate([np.full(n, cons.box), [1.0]])
        x0 = np.full(n, 1.0 / n)
        to_w = lambda x: x  # noqa: E731
    else:
        P = 2.0 * np.block([[S, -S], [-S, S]])
        A = np.vstack([np.eye(2 * n),
                       np.concatenate([np.ones(n), -np.ones(n)])[None],
                       np.concatenate([np.zeros(n), np.ones(n)])[None]])
        l = np.concatenate([np.zeros(2 * n), [1.0, 0.0]])
        u = np.concatenate([np.full(2 * n, cons.box), [1.0, cons.short_cap]])
        x0 = np.concatenate([np.full(n, 1.0 / n), np.zeros(n)])
        to_w = lambda x: x[:n] - x[n:]  # noqa: E731

    def polish(x):
        w_bar = to_w(x)
        for tau in (1e-6, 1e-8, 1e-5, 1e-4):
            w = _polish(S, w_bar, cons, tau)
            if w is not None:
                return w
        return None

    w, x, iters, res = _Admm(P, A, l, u).run(x0, polish)
    if w is None:
        log.warning("constrained_min_var: no verified active set after %d iterations "
                    "(residuals %.2e, %.2e); clipping the converged iterate", iters, *res)
        w = _repair(to_w(x), cons)
    return w


# ---------------------------------------------------------------------------
# backtest bookkeeping
# ---------------------------------------------------------------------------

def hold_weights(prev_w, prev_asset_returns, prev_portfolio_return: float) -> np.ndarray:
    """Weights after one day of drift: ``w (1 + r_i) / (1 + r_p)``."""
    denom = 1.0 + float(prev_portfolio_return)
    if denom == 0.0:
        raise DomainError("portfolio lost all value (1 + r_p = 0); hold weights undefined")
    return np.asarray(prev_w, dtype=float) * (1.0 + np.asarray(prev_asset_returns, dtype=float)) / denom


def partial_rebalance(hold, target, fraction: float) -> tuple[np.ndarray, float]:
    """Move ``fraction`` of the way from the hold portfolio to the target.

    Returns the blended weights (renormalized to sum to one) and the size of
    the renormalization, ``|sum - 1|`` before dividing.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    hold = np.asarray(hold, dtype=float)
    target = np.asarray(target, dtype=float)
    if fraction == 1:
        w = target.copy()
    else:
        w = (1.0 - fraction) * hold + fraction * target
    s = w.sum()
    delta = abs(s - 1.0)
    if delta > 0:
        w = w / s
    return w, float(delta)


def portfolio_statistics(port_returns, risk_free, weights, hold, realized_sigma,
                         annualization_days: int = ANNUALIZATION_DAYS) -> BacktestReport:
    """The thirteen summary statistics of a backtest.

    Parameters
    ----------
    port_returns, risk_free : (D,) daily portfolio and risk-free returns
    weights : (D, N) weights held over each day
    hold : (D, N) drifted weights each day before rebalancing; row 0 is
        ignored because the first day has no predecessor
    realized_sigma : (D, N, N) realized covariance of each day

    Notes
    -----
    Volatilities are annualized with ``sqrt(annualization_days)`` and mean
    returns with ``annualization_days``; both are reported in percent.
    Skewness needs at least three days and is NaN otherwise; kurtosis and
    skewness are NaN when the returns do not vary. The Sharpe ratio of a
    constant return stream is reported as 0.
    """
    rp = np.asarray(port_returns, dtype=float)
    rf = np.asarray(risk_free, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = rp.size
    ann = annualization_days
    dev = rp - rp.mean()
    sigma = math.sqrt(np.mean(dev ** 2))
    neg = dev < 0
    lpsd = math.sqrt(np.sum(dev[neg] ** 2) / neg.sum()) if neg.any() else 0.0
    if sigma > 0:
        kurt = float(np.mean(dev ** 4) / sigma ** 4 - 3.0)
        skew = (float(math.sqrt(n * (n - 1)) / (n - 2) * np.mean(dev ** 3) / sigma ** 3)
                if n >= 3 else float("nan"))
    else:
        kurt = skew = float("nan")

    sig = np.asarray(realized_sigma, dtype=float)
    vols = np.sqrt(np.maximum(np.diagonal(sig, axis1=1, axis2=2), 0.0))
    pvar = np.einsum("di,dij,dj->d", w, sig, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        dr = np.sum(w * vols, axis=1) / np.sqrt(pvar)
    turnover = (float(np.mean(np.abs(w[1:] - np.asarray(hold)[1:]))) * 100.0 if n > 1 else 0.0)

    excess_daily = float(np.mean(rp - rf))
    sd_ann = sigma * math.sqrt(ann)
    sharpe = excess_daily * ann / sd_ann if sd_ann > 0 else 0.0
    return BacktestReport(
        std_dev=sd_ann * 100.0,
        lower_partial_std=lpsd * math.sqrt(ann) * 100.0,
        kurtosis=kurt,
        skewness=skew,
        avg_diversification_ratio=float(np.mean(dr)),
        avg_max_weight=float(np.mean(w.max(axis=1))),
        avg_min_weight=float(np.mean(w.min(axis=1))),
        avg_gross_leverage=float(np.mean(np.sum(np.abs(w), axis=1))),
        proportion_leverage=float(np.mean(w < 0)) * 100.0,
        avg_turnover=turnover,
        avg_excess_return=excess_daily * ann * 100.0,
        cumulative_return=(float(np.prod(1.0 + rp)) - 1.0) * 100.0,
        sharpe=float(sharpe),
    )


def _positions(dates: np.ndarray, target: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(target, dates)
    pos_c = np.minimum(pos, target.size - 1)
    return np.where((pos < target.size) & (target[pos_c] == dates), pos_c, -1)


def backtest(forecasts: ForecastSet, returns: ReturnsPanel, actual_panel: CovPanel,
             cons: ConstraintSet = ConstraintSet(), cfg: BacktestConfig = BacktestConfig()) -> BacktestResult:
    """Daily minimum-variance backtest driven by covariance forecasts.

    Each forecast is dated by the day it targets: the weights built from it
    are held over that day and earn that day's returns. Between days the
    weights drift with returns; the new target is blended in with
    ``cfg.rebalance_fraction`` (the first day starts at the target).
    Forecast days without a return are skipped and listed in the result.
    """
    if forecasts.sigma_hat.shape[-1] != returns.n:
        raise ValidationError(f"forecasts cover {forecasts.sigma_hat.shape[-1]} assets, returns {returns.n}")
    rpos = _positions(forecasts.dates, returns.dates)
    skipped = [str(d) for d, p in zip(forecasts.dates, rpos) if p < 0]
    if skipped:
        log.warning("backtest: %d forecast day(s) without returns skipped: %s", len(skipped),
                    ", ".join(skipped[:10]))
    keep = np.flatnonzero(rpos >= 0)
    if keep.size == 0:
        raise AlignmentError("no forecast date has a matching return", forecasts.dates)
    apos = _positions(forecasts.dates[keep], actual_panel.dates)
    if np.any(apos < 0):
        raise AlignmentError("realized panel lacks forecast dates", forecasts.dates[keep][apos < 0])

    D, N = keep.size, returns.n
    weights = np.empty((D, N))
    hold = np.full((D, N), np.nan)
    rp = np.empty(D)
    renorm = np.zeros(D)
    repaired = 0
    for j, k in enumerate(keep):
        sig = symmetrize(forecasts.sigma_hat[k])
        try:
            target = constrained_min_var(sig, cons)
        except DomainError:
            floor = 1e-10 * max(np.trace(sig) / N, np.finfo(float).tiny)
            target = constrained_min_var(psd_project(sig, floor), cons)
            repaired += 1
            log.info("backtest: forecast for %s repaired to positive definite", forecasts.dates[k])
        if j == 0:
            w = target
        else:
            r_prev = returns.returns[rpos[keep[j - 1]]]
            hold[j] = hold_weights(weights[j - 1], r_prev, rp[j - 1])
            w, renorm[j] = partial_rebalance(hold[j], target, cfg.rebalance_fraction)
        weights[j] = w
        rp[j] = float(w @ returns.returns[rpos[k]])
    if np.any(renorm > 0):
        log.debug("backtest: largest renormalization %.3e", renorm.max())

    rf = returns.risk_free[rpos[keep]]
    realized = actual_panel.matrices()[apos] if actual_panel.n == N else None
    if realized is None:
        raise ValidationError("realized panel and returns cover different assets")
    report = portfolio_statistics(rp, rf, weights, hold, realized, cfg.annualization_days)
    return BacktestResult(report, forecasts.dates[keep].copy(), weights, hold, rp, skipped, repaired, renorm)


def save_report(path, reports: dict) -> None:
    """Statistic rows (table labels) by model columns."""
    names = list(reports)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", *names])
        for field_name, label in REPORT_ROWS:
            w.writerow([label] + [format(getattr(reports[m], field_name), ".10g") for m in names])


def save_weights(path, result: BacktestResult, assets) -> None:
    """Per-day weights with the realized portfolio return, for audit."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "portfolio_return", *assets])
        for d, r, row in zip(result.dates, result.portfolio_returns, result.weights):
            w.writerow([str(d), repr(float(r))] + [repr(float(x)) for x in row])


def format_report(reports: dict) -> str:
    """Plain-text table of the statistics, one row per statistic."""
    names = list(reports)
    width = max(len(label) for _, label in REPORT_ROWS)
    lines = [" " * width + "".join(f"{n:>14}" for n in names)]
    for field_name, label in REPORT_ROWS:
        lines.append(f"{label:<{width}}" + "".join(f"{getattr(reports[n], field_name):>14.4f}" for n in names))
    return "\n".join(lines)
