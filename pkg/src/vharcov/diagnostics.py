"""Long-memory estimators for loading series and the omitted-factor scan."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .errors import ValidationError

GPH, LOCAL_WHITTLE = "GPH", "LOCAL_WHITTLE"
WHITTLE_BOUNDS = (-0.49, 0.99)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class LongMemoryEstimate:
    d_hat: float
    bandwidth: int
    method: str


@dataclass(frozen=True)
class OmittedFactorScan:
    xi: np.ndarray
    eigenvalues: np.ndarray  # descending, first k_max + 1
    penalty: float
    sigma2: float
    detected_k: int          # k_max + 1 when no xi(k) is negative


def default_bandwidth(T: int) -> int:
    return int(math.floor(T ** 0.5))


def periodogram(x) -> tuple[np.ndarray, np.ndarray]:
    """Fourier frequencies ``2 pi j / T`` (j = 1..T//2) and the periodogram."""
    x = np.asarray(x, dtype=float)
    T = x.size
    xc = x - x.mean()
    f = np.fft.rfft(xc)
    j = np.arange(1, T // 2 + 1)
    lam = 2.0 * np.pi * j / T
    return lam, np.abs(f[j]) ** 2 / (2.0 * np.pi * T)


def _prepare(series, bandwidth):
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 32:
        raise ValidationError(f"long-memory estimation needs at least 32 observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("series contains non-finite values")
    if np.ptp(x) == 0.0:
        raise ValidationError("series is constant; its spectrum is identically zero")
    m = default_bandwidth(x.size) if bandwidth is None else int(bandwidth)
    lam, I = periodogram(x)
    if m < 2 or m > lam.size:
        raise ValidationError(f"bandwidth must be in 2..{lam.size}, got {m}")
    return lam[:m], I[:m], m


def gph_estimate(series, bandwidth: int | None = None) -> LongMemoryEstimate:
    """Log-periodogram regression of log I(lambda_j) on -2 log(2 sin(lambda_j / 2))."""
    lam, I, m = _prepare(series, bandwidth)
    if np.any(I <= 0):
        raise ValidationError("zero periodogram ordinate inside the bandwidth")
    xreg = -2.0 * np.log(2.0 * np.sin(lam / 2.0))
    yreg = np.log(I)
    xc = xreg - xreg.mean()
    d = float(xc @ (yreg - yreg.mean()) / (xc @ xc))
    return LongMemoryEstimate(d, m, GPH)


def whittle_objective(d, lam, I) -> float:
    """Local Whittle contrast ``log(mean lam^{2d} I) - 2d mean log lam``."""
    loglam = np.log(lam)
    a = 2.0 * d * loglam + np.log(I)
    top = a.max()
    return float(top + np.log(np.mean(np.exp(a - top))) - 2.0 * d * loglam.mean())


def _golden_section(f, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    e = a + _GOLDEN * (b - a)
    fc, fe = f(c), f(e)
    while b - a > tol:
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + _GOLDEN * (b - a)
            fe = f(e)
    return 0.5 * (a + b)


def local_whittle_estimate(series, bandwidth: int | None = None, tol: float = 1e-6) -> LongMemoryEstimate:
    """Minimize the local Whittle contrast over d in [-0.49, 0.99].

    The contrast is convex in d, so a golden-section search brackets the
    minimum; a 21-point grid is evaluated first and the search is confined to
    the neighbours of the best grid point.
    """
    lam, I, m = _prepare(series, bandwidth)
    if np.any(I <= 0):
        raise ValidationError("zero periodogram ordinate inside the bandwidth")
    lo, hi = WHITTLE_BOUNDS
    grid = np.linspace(lo, hi, 21)
    vals = [whittle_objective(d, lam, I) for d in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    d = _golden_section(lambda v: whittle_objective(v, lam, I), a, b, tol)
    if whittle_objective(d, lam, I) > vals[i]:
        d = float(grid[i])
    return LongMemoryEstimate(float(d), m, LOCAL_WHITTLE)


def arfima_weights(d: float, n_terms: int = 10_000) -> np.ndarray:
    """MA(infinity) coefficients of (1 - L)^{-d}, truncated."""
    k = np.arange(1, n_terms)
    psi = np.empty(n_terms)
    psi[0] = 1.0
    psi[1:] = np.cumprod((k - 1 + d) / k)
    return psi


def simulate_arfima(n: int, d: float, rng: np.random.Generator, n_terms: int = 10_000, scale: float = 1.0,
                    size: int | None = None) -> np.ndarray:
    """ARFIMA(0, d, 0) draws via a truncated MA expansion.

    Returns shape (n,) or (size, n) when ``size`` is given.
    """
    psi = arfima_weights(d, n_terms)
    shape = (1 if size is None else size, n + n_terms - 1)
    eps = rng.standard_normal(shape) * scale
    out = fftconvolve(eps, psi[None, :], mode="valid", axes=1)
    return out[0] if size is None else out


def estimate_many(series, method: str = GPH, bandwidth: int | None = None) -> np.ndarray:
    """d estimates for each column of a (T, S) array (NaN for degenerate series)."""
    x = np.asarray(series, dtype=float)
    fn = gph_estimate if method == GPH else local_whittle_estimate
    out = np.full(x.shape[1], np.nan)
    for s in range(x.shape[1]):
        try:
            out[s] = fn(x[:, s], bandwidth).d_hat
        except ValidationError:
            pass
    return out


def omitted_factor_scan(residuals, k_max: int) -> OmittedFactorScan:
    """Eigenvalue-minus-penalty criterion for omitted factors.

    ``residuals`` is T x N. With ``mu_1 >= mu_2 >= ...`` the eigenvalues of
    ``(1/(NT)) sum_i e_i e_i'`` (T x T), ``xi(k) = mu_{k+1} - g(N, T)`` and
    ``g = (N+T)/(NT) log(NT/(N+T)) sigma2`` with ``sigma2`` the mean squared
    residual. The detected number is the smallest k with ``xi(k) < 0``.
    """
    e = np.asarray(residuals, dtype=float)
    if e.ndim != 2:
        raise ValidationError("residuals must be a T x N matrix")
    T, N = e.shape
    if T < 2 or N < 2:
        raise ValidationError("need T, N >= 2")
    if not 0 <= k_max < min(T, N):
        raise ValidationError(f"k_max must be in 0..{min(T, N) - 1}")
    # the T x T and N x N forms share their non-zero spectrum
    gram = e.T @ e if N < T else e @ e.T
    mu = np.sort(np.linalg.eigvalsh(gram / (N * T)))[::-1]
    sigma2 = float(np.mean(e * e))
    g = (N + T) / (N * T) * math.log(N * T / (N + T)) * sigma2
    xi = mu[: k_max + 1] - g
    neg = np.flatnonzero(xi < 0)
    detected = int(neg[0]) if neg.size else k_max + 1
    return OmittedFactorScan(xi, mu[: k_max + 1].copy(), g, sigma2, detected)


def save_d_estimates(path, labels, estimates: dict) -> None:
    """Per-series d estimates, one column per method."""
    methods = list(estimates)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", *methods])
        for i, lab in enumerate(labels):
            w.writerow([lab] + [format(float(estimates[m][i]), ".10g") for m in methods])


def save_xi(path, scans: dict) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "k", "xi", "eigenvalue", "penalty"])
        for name, scan in scans.items():
            for k, (x, mu) in enumerate(zip(scan.xi, scan.eigenvalues)):
                w.writerow([name, k, format(float(x), ".10g"), format(float(mu), ".10g"),
                            format(scan.penalty, ".10g")])
