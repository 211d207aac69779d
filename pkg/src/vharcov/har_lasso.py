"""HAR regressors and per-equation estimators (OLS, LASSO, adaptive LASSO).

Penalized fits minimize::

    (1/T) ||y - Z gamma||^2 + 2 lambda sum_j w_j |beta_j|

where ``gamma = (intercept, beta)`` and the intercept (column 0 of ``Z``,
all ones) is never penalized; ``w_j = 1`` for LASSO and ``1/|beta_j^(1)|``
for the second adaLASSO step. The penalty is chosen on a grid by

    BIC(lambda) = T log(RSS) + #{j : beta_j != 0} log(T).

Coordinate descent runs on centred, unit-variance columns with the penalty
rescaled per column, so the returned coefficients minimize the objective on
the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from .errors import DimensionError, InsufficientHistoryError, NumericError, ValidationError

OLS, LASSO, ADALASSO = "OLS", "LASSO", "ADALASSO"
HAR_SPANS = (1, 5, 22)

N_LAMBDA = 100
LAMBDA_RATIO = 1e-4
CD_TOL = 1e-9
CD_MAX_SWEEPS = 100_000
_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    coefs: np.ndarray
    active: tuple
    lam: float
    bic: float
    method: str

    @property
    def n_active(self) -> int:
        return len(self.active)

    @property
    def gamma(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefs])


@dataclass(frozen=True)
class HarDesign:
    response: np.ndarray
    regressors: np.ndarray  # column 0 = ones
    m: int


# ---------------------------------------------------------------------------
# HAR regressors
# ---------------------------------------------------------------------------

def _rolling_mean(x: np.ndarray, span: int) -> np.ndarray:
    """Trailing mean over ``span`` rows; row k of the output ends at row k+span-1."""
    if span == 1:
        return x.copy()
    win = np.lib.stride_tricks.sliding_window_view(x, span, axis=0)
    return win.mean(axis=-1)


def har_regressors(series, spans=HAR_SPANS) -> tuple[np.ndarray, int]:
    """Daily / weekly / monthly averages of each column of ``series``.

    Row k of the result describes day ``offset + k`` and uses days up to and
    including that day only. Columns are ordered
    ``(day_1..day_m, week_1..week_m, month_1..month_m)``.

    Returns
    -------
    regressors : ndarray, shape (T - max(spans) + 1, len(spans) * m)
    offset : int
        Index of the first day with a complete set of averages (21 for the
        default spans). Pair row k with the response on day ``offset + k + 1``.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    longest = max(spans)
    if x.shape[0] < longest:
        raise InsufficientHistoryError(f"HAR regressors need at least {longest} observations, got {x.shape[0]}")
    offset = longest - 1
    blocks = [_rolling_mean(x, s)[longest - s:] for s in spans]
    return np.concatenate(blocks, axis=1), offset


def har_design(series, spans=HAR_SPANS) -> HarDesign:
    """Regression design pairing regressors on day t with responses on t+1.

    ``series`` is T x m; the design has one row per response day and a
    leading intercept column. Only the response is univariate per equation,
    so ``response`` is T' x m here and callers pick a column.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    reg, off = har_regressors(x, spans)
    z = np.column_stack([np.ones(reg.shape[0] - 1), reg[:-1]])
    return HarDesign(x[off + 1:], z, x.shape[1])


# ---------------------------------------------------------------------------
# coordinate descent kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _cd_paths(G, C, lambdas, pen, tol, max_sweeps, coefs_out, sweeps_out):
    """Warm-started coordinate descent along a decreasing lambda grid.

    Minimizes ``b'Gb - 2 c'b + 2 lam * sum_j pen_j |b_j|`` for each response
    column of ``C`` (p x E) and each ``lambdas[e, l]``. ``pen_j <= 0`` marks a
    coordinate that is fixed at zero. Writes ``coefs_out[e, l, :]``.
    """
    p = G.shape[0]
    E = C.shape[1]
    L = lambdas.shape[1]
    b = np.zeros(p)
    r = np.zeros(p)
    for e in range(E):
        for j in range(p):
            b[j] = 0.0
            r[j] = C[j, e]
        for l in range(L):
            lam = lambdas[e, l]
            sweeps = 0
            while sweeps < max_sweeps:
                sweeps += 1
                max_delta = 0.0
                max_b = 0.0
                for j in range(p):
                    if pen[j] <= 0.0:
                        continue
                    gjj = G[j, j]
                    old = b[j]
                    z = r[j] + gjj * old
                    thr = lam * pen[j]
                    if z > thr:
                        new = (z - thr) / gjj
                    elif z < -thr:
                        new = (z + thr) / gjj
                    else:
                        new = 0.0
                    delta = new - old
                    if delta != 0.0:
                        b[j] = new
                        for k in range(p):
                            r[k] -= G[k, j] * delta
                        ad = abs(delta)
                        if ad > max_delta:
                            max_delta = ad
                    ab = abs(new)
                    if ab > max_b:
                        max_b = ab
                if max_delta < tol * (1.0 + max_b):
                    break
            sweeps_out[e, l] = sweeps
            for j in range(p):
                coefs_out[e, l, j] = b[j]


# ---------------------------------------------------------------------------
# penalized fits
# ---------------------------------------------------------------------------

def _check_design(y: np.ndarray, Z: np.ndarray) -> None:
    if Z.ndim != 2:
        raise DimensionError(f"design must be 2-d, got shape {Z.shape}")
    if y.shape[0] != Z.shape[0]:
        raise DimensionError(f"response length {y.shape[0]} vs design rows {Z.shape[0]}")
    if Z.shape[0] < 1:
        raise ValidationError("need at least one observation")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise ValidationError("NaN or infinite value in regression inputs")
    if not np.all(Z[:, 0] == 1.0):
        raise ValidationError("design column 0 must be the intercept (all ones)")


@dataclass
class _Standardized:
    T: int
    zmean: np.ndarray
    scale: np.ndarray  # 0 for dropped (constant) columns
    G: np.ndarray
    ymean: np.ndarray
    C: np.ndarray      # p x E, X'y_c / T
    yy: np.ndarray     # E, y_c'y_c / T


def _standardize(Y: np.ndarray, Z: np.ndarray) -> _Standardized:
    T = Z.shape[0]
    X = Z[:, 1:]
    zmean = X.mean(axis=0)
    Xc = X - zmean
    scale = np.sqrt(np.mean(Xc * Xc, axis=0))
    big = np.max(np.abs(X), axis=0) if X.size else np.zeros(0)
    keep = scale > 1e-12 * np.maximum(big, _TINY)
    scale = np.where(keep, scale, 0.0)
    Xs = np.where(keep, Xc / np.where(keep, scale, 1.0), 0.0)
    ymean = Y.mean(axis=0)
    Yc = Y - ymean
    return _Standardized(
        T=T, zmean=zmean, scale=scale,
        G=np.ascontiguousarray(Xs.T @ Xs / T),
        ymean=ymean,
        C=np.ascontiguousarray(Xs.T @ Yc / T),
        yy=np.einsum("te,te->e", Yc, Yc) / T,
    )


def _lambda_max(st: _Standardized, pen: np.ndarray) -> np.ndarray:
    ok = pen > 0
    if not np.any(ok):
        return np.zeros(st.C.shape[1])
    return np.max(np.abs(st.C[ok]) / pen[ok, None], axis=0)


def default_lambda_grid(lam_max: float, n: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    """Decreasing log-spaced grid from ``lam_max`` to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(1)
    return lam_max * np.logspace(0.0, np.log10(ratio), n)


def _penalized_many(Y, Z, weights=None, lambda_grid=None, method=LASSO):
    """Fit every column of ``Y`` against the shared design ``Z``.

    ``weights`` (length p) are adaptive penalty weights; ``np.inf`` excludes a
    column. Returns a list of LinearFit plus the full paths for inspection.
    """
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    Z = np.asarray(Z, dtype=float)
    _check_design(Y, Z)
    st = _standardize(Y, Z)
    T, E = Y.shape[0], Y.shape[1]
    p = Z.shape[1] - 1
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (p,):
        raise DimensionError(f"expected {p} penalty weights, got {w.shape}")
    usable = (st.scale > 0) & np.isfinite(w)
    # penalty on standardized coefficient b_j = beta_j * scale_j
    pen = np.where(usable, w / np.where(st.scale > 0, st.scale, 1.0), 0.0)

    if lambda_grid is None:
        lmax = _lambda_max(st, pen)
        lambdas = np.stack([default_lambda_grid(lm) if lm > 0 else np.zeros(N_LAMBDA) for lm in lmax])
    else:
        grid = np.sort(np.asarray(lambda_grid, dtype=float).ravel())[::-1]
        if grid.size == 0 or np.any(grid < 0) or not np.all(np.isfinite(grid)):
            raise ValidationError("lambda grid must be non-empty, finite and non-negative")
        lambdas = np.tile(grid, (E, 1))
    lambdas = np.ascontiguousarray(lambdas)
    L = lambdas.shape[1]

    coefs = np.zeros((E, L, p))
    sweeps = np.zeros((E, L), dtype=np.int64)
    if p and np.any(pen > 0):
        _cd_paths(st.G, st.C, lambdas, np.ascontiguousarray(pen), CD_TOL, CD_MAX_SWEEPS, coefs, sweeps)
    if np.any(sweeps >= CD_MAX_SWEEPS):
        raise NumericError("coordinate descent hit the sweep limit")

    # RSS/T = yy - 2 c'b + b'Gb, evaluated for every (equation, lambda)
    cb = np.einsum("elp,pe->el", coefs, st.C)
    bgb = np.einsum("elp,pq,elq->el", coefs, st.G, coefs)
    rss = np.maximum(T * (st.yy[:, None] - 2.0 * cb + bgb), _TINY)
    nnz = np.count_nonzero(coefs, axis=2)
    bic = T * np.log(rss) + nnz * np.log(T)
    pick = np.argmin(bic, axis=1)  # first minimum = largest lambda on ties

    safe_scale = np.where(st.scale > 0, st.scale, 1.0)
    fits = []
    for e in range(E):
        b = coefs[e, pick[e]]
        beta = np.where(st.scale > 0, b / safe_scale, 0.0)
        intercept = float(st.ymean[e] - beta @ st.zmean)
        fits.append(LinearFit(intercept, beta, tuple(int(j) for j in np.flatnonzero(beta)),
                              float(lambdas[e, pick[e]]), float(bic[e, pick[e]]), method))
    paths = {"lambdas": lambdas, "coefs": np.where(st.scale > 0, coefs / safe_scale, 0.0), "bic": bic}
    return (fits[0] if single else fits), paths


def lasso_fit(y, Z, lambda_grid=None) -> LinearFit:
    """LASSO with BIC-selected penalty. ``Z`` includes the intercept column."""
    return _penalized_many(y, Z, None, lambda_grid, LASSO)[0]


def lasso_fit_many(Y, Z, lambda_grid=None) -> list[LinearFit]:
    """One LASSO fit per column of ``Y``, all sharing the design ``Z``."""
    return _penalized_many(Y, Z, None, lambda_grid, LASSO)[0]


def lasso_path(y, Z, lambda_grid=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slope coefficients along the grid: ``(lambdas, coefs[L, p], bic[L])``."""
    _, paths = _penalized_many(np.asarray(y, dtype=float)[:, None], Z, None, lambda_grid, LASSO)
    return paths["lambdas"][0], paths["coefs"][0], paths["bic"][0]


def weighted_lasso_fit(y, Z, weights, lambda_grid=None) -> LinearFit:
    """LASSO with per-slope penalty weights (``inf`` keeps a slope at zero)."""
    return _penalized_many(y, Z, weights, lambda_grid, LASSO)[0]


def _intercept_only(y: np.ndarray, p: int, method: str) -> LinearFit:
    T = y.shape[0]
    yc = y - y.mean()
    rss = max(float(yc @ yc), _TINY)
    return LinearFit(float(y.mean()), np.zeros(p), (), 0.0, float(T * np.log(rss)), method)


def adalasso_fit_many(Y, Z, lambda_grid=None) -> list[LinearFit]:
    """Two-step adaptive LASSO for every column of ``Y`` (shared design).

    Step 1 is :func:`lasso_fit`. Step 2 refits using only the step-1 active
    slopes, each penalized by ``1 / |beta_j^(1)|``, with the penalty again
    chosen by BIC. An empty step-1 active set gives an intercept-only fit.
    """
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    Z = np.asarray(Z, dtype=float)
    first = lasso_fit_many(Y, Z, lambda_grid)
    p = Z.shape[1] - 1
    out = []
    for e, f in enumerate(first):
        if not f.active:
            out.append(_intercept_only(Y[:, e], p, ADALASSO))
            continue
        w = np.full(p, np.inf)
        w[list(f.active)] = 1.0 / np.abs(f.coefs[list(f.active)])
        fit, _ = _penalized_many(Y[:, e], Z, w, None, ADALASSO)
        out.append(fit)
    return out[0] if single else out


def adalasso_fit(y, Z, lambda_grid=None) -> LinearFit:
    return adalasso_fit_many(np.asarray(y, dtype=float), Z, lambda_grid)


# ---------------------------------------------------------------------------
# OLS and prediction
# ---------------------------------------------------------------------------

def ols_fit(y, Z) -> LinearFit:
    """Least squares on the full design; every slope counts as active."""
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    _check_design(y, Z)
    T, p1 = Z.shape
    gamma, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    if rank < p1:
        gram = Z.T @ Z
        gram[np.diag_indices(p1)] += 1e-12 * np.trace(gram)
        try:
            gamma = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), Z.T @ y)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericError(f"OLS design is rank deficient: {exc}") from exc
    resid = y - Z @ gamma
    rss = max(float(resid @ resid), _TINY)
    p = p1 - 1
    return LinearFit(float(gamma[0]), gamma[1:].copy(), tuple(range(p)), 0.0,
                     float(T * np.log(rss) + p * np.log(T)), OLS)


def ols_batch(Y: np.ndarray, Z: np.ndarray, cond_limit: float = 1e12):
    """Independent OLS problems ``Y[s] ~ Z[s]`` stacked on the first axis.

    Returns ``(gamma[S, p], ok[S])``. Columns are equilibrated before solving
    the normal equations; problems whose scaled Gram matrix is too
    ill-conditioned get a ``1e-12 * trace`` ridge, and any that still fail
    are reported with ``ok = False``.
    """
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    norms = np.sqrt(np.einsum("stp,stp->sp", Z, Z))
    norms = np.where(norms > 0, norms, 1.0)
    Zs = Z / norms[:, None, :]
    G = np.einsum("stp,stq->spq", Zs, Zs)
    c = np.einsum("stp,st->sp", Zs, Y)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(G)
    bad = ~np.isfinite(cond) | (cond > cond_limit)
    if np.any(bad):
        p = G.shape[-1]
        tr = np.trace(G, axis1=1, axis2=2)
        G[bad] += (1e-12 * tr[bad])[:, None, None] * np.eye(p)
    ok = np.ones(Y.shape[0], dtype=bool)
    try:
        gamma = np.linalg.solve(G, c[..., None])[..., 0]
    except np.linalg.LinAlgError:
        gamma = np.zeros_like(c)
        for s in range(G.shape[0]):
            try:
                gamma[s] = np.linalg.solve(G[s], c[s])
            except np.linalg.LinAlgError:
                ok[s] = False
    ok &= np.all(np.isfinite(gamma), axis=1)
    return gamma / norms, ok


def predict(fit: LinearFit, z) -> float:
    """One-step forecast ``intercept + coefs . z[1:]`` for a row with leading 1."""
    z = np.asarray(z, dtype=float)
    if z.shape != (fit.coefs.size + 1,):
        raise DimensionError(f"regressor row must have length {fit.coefs.size + 1}, got {z.shape}")
    if z[0] != 1.0:
        raise ValidationError("regressor row must start with the intercept entry 1")
    return float(fit.intercept + fit.coefs @ z[1:])


def predict_many(fits, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.array([predict(f, z) for f in fits])


def fit_many(Y, Z, estimator: str, lambda_grid=None) -> list[LinearFit]:
    """Dispatch on estimator name for a block of equations sharing ``Z``."""
    est = estimator.upper()
    if est == LASSO:
        return lasso_fit_many(Y, Z, lambda_grid)
    if est == ADALASSO:
        return adalasso_fit_many(Y, Z, lambda_grid)
    if est == OLS:
        Y = np.asarray(Y, dtype=float)
        return [ols_fit(Y[:, e], Z) for e in range(Y.shape[1])]
    raise ValidationError(f"unknown estimator {estimator!r}")


def objective(y, Z, gamma, lam, weights=None) -> float:
    """Penalized least-squares objective on the original scale."""
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    r = y - Z @ gamma
    beta = gamma[1:]
    w = np.ones_like(beta) if weights is None else np.asarray(weights, dtype=float)
    pen = np.sum(np.where(beta != 0, w * np.abs(beta), 0.0))
    return float(r @ r / y.shape[0] + 2.0 * lam * pen)


def bic_value(rss: float, n_active: int, T: int) -> float:
    return float(T * np.log(rss) + n_active * np.log(T))
