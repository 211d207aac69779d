"""Synthetic realized-covariance panels with a known factor structure.

The generator reproduces the stylized facts the forecasting pipeline relies
on: persistent (HAR-type) log-variances, a small number of traded factors,
residual covariance concentrated inside sector blocks and slowly varying,
long-memory loadings. Each observed matrix is the latent covariance plus a
small symmetric measurement error, repaired to be positive definite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import simulate_arfima
from .errors import ConfigError
from .factor_model import FACTOR_NAMES, FactorSpec, SectorAssignment, block_assemble, proportional_sector_sizes
from .panel_io import CovPanel, ReturnsPanel, vech_many
from .transforms import psd_project

START_DATE = "2010-01-04"
_BURN_IN = 500


@dataclass(frozen=True)
class SynthConfig:
    N: int = 30
    K: int = 3
    S: int = 3
    T: int = 600
    persistence: tuple = (0.35, 0.3, 0.25)
    beta_d: float = 0.3
    block_strength: float = 0.3
    noise_scale: float = 0.5
    sector_sizes: tuple | None = None
    vol_of_vol: float = 0.25      # sd of the log-variance innovations
    beta_scale: float = 0.1       # sd of the loading fluctuations around their base
    market_vol: float = 0.01      # daily volatility of the market factor
    style_vol: float = 0.005      # daily volatility of the long-short factors
    idio_vol: float = 0.015       # daily residual volatility
    risk_free: float = 0.0        # daily risk-free rate

    def __post_init__(self):
        object.__setattr__(self, "persistence", tuple(float(p) for p in self.persistence))
        if self.sector_sizes is not None:
            object.__setattr__(self, "sector_sizes", tuple(int(s) for s in self.sector_sizes))
        if min(self.N, self.K, self.S, self.T) < 1:
            raise ConfigError("N, K, S and T must be positive")
        if self.N < self.K:
            raise ConfigError(f"N ({self.N}) must be at least K ({self.K})")
        if self.S > self.N:
            raise ConfigError(f"S ({self.S}) cannot exceed N ({self.N})")
        if len(self.persistence) != 3 or any(p < 0 for p in self.persistence):
            raise ConfigError("persistence must be three non-negative HAR coefficients")
        if sum(self.persistence) >= 1:
            raise ConfigError(f"persistence coefficients sum to {sum(self.persistence):.4g}; need < 1")
        if not -0.5 < self.beta_d < 0.5:
            raise ConfigError("beta_d must lie in (-0.5, 0.5)")
        if not 0 <= self.block_strength < 1:
            raise ConfigError("block_strength must lie in [0, 1)")
        if self.noise_scale < 0 or self.vol_of_vol < 0 or self.beta_scale < 0:
            raise ConfigError("noise_scale, vol_of_vol and beta_scale must be non-negative")
        if self.sector_sizes is not None:
            if len(self.sector_sizes) != self.S or min(self.sector_sizes) < 1:
                raise ConfigError(f"sector_sizes must hold {self.S} positive counts")
            if sum(self.sector_sizes) != self.N:
                raise ConfigError(f"sector_sizes sum to {sum(self.sector_sizes)}, expected N={self.N}")


@dataclass(frozen=True)
class SynthTruth:
    """Latent quantities behind a synthetic panel."""

    sigma_f: np.ndarray        # (T, K, K)
    betas: np.ndarray          # (T, K, N)
    residual: np.ndarray       # (T, N, N) block-diagonal
    latent_vech: np.ndarray    # (T, N(N+1)/2) covariance before measurement noise


def _har_logvar(rng, n_series: int, T: int, phi, vol: float) -> np.ndarray:
    """Zero-mean HAR recursion on log-variance deviations, shape (T, n_series)."""
    total = T + _BURN_IN
    eta = rng.standard_normal((total, n_series)) * vol
    x = np.zeros((total + 22, n_series))
    pd_, pw, pm = phi
    for t in range(22, total + 22):
        x[t] = (pd_ * x[t - 1] + pw * x[t - 5:t].mean(axis=0) + pm * x[t - 22:t].mean(axis=0)
                + eta[t - 22])
    return x[-T:]


def _factor_weights(rng, N: int, K: int) -> np.ndarray:
    W = np.zeros((N, K))
    W[:, 0] = 1.0 / N
    third = max(N // 3, 1)
    for k in range(1, K):
        order = np.argsort(rng.standard_normal(N), kind="stable")
        short, long_ = order[:third], order[-third:]
        W[long_, k] = 1.0 / third
        W[short, k] -= 1.0 / third
    return W


def _correlation(rng, K: int) -> np.ndarray:
    a = np.eye(K) + 0.3 * rng.standard_normal((K, K))
    c = a @ a.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def generate_synthetic(cfg: SynthConfig, seed: int = 0):
    """Simulate a panel.

    Returns
    -------
    (CovPanel, ReturnsPanel, FactorSpec, SectorAssignment, SynthTruth)
    """
    rng = np.random.default_rng(seed)
    N, K, S, T = cfg.N, cfg.K, cfg.S, cfg.T
    sizes = list(cfg.sector_sizes) if cfg.sector_sizes is not None else proportional_sector_sizes(N, S)
    sectors = SectorAssignment.from_sizes(sizes)
    W = _factor_weights(rng, N, K)
    names = tuple(FACTOR_NAMES[:K]) if K <= len(FACTOR_NAMES) else tuple(f"F{k + 1}" for k in range(K))
    spec = FactorSpec(W, names)

    # factor covariances
    corr = _correlation(rng, K)
    base_vol = np.array([cfg.market_vol] + [cfg.style_vol] * (K - 1))
    hf = _har_logvar(rng, K, T, cfg.persistence, cfg.vol_of_vol)
    vol_f = base_vol * np.exp(hf / 2.0)
    sigma_f = corr[None] * vol_f[:, :, None] * vol_f[:, None, :]

    # loadings: fixed base plus long-memory fluctuations
    base = np.zeros((K, N))
    base[0] = 1.0 + 0.25 * rng.standard_normal(N)
    if K > 1:
        base[1:] = 0.4 * rng.standard_normal((K - 1, N))
    sd_theory = math.sqrt(math.gamma(1 - 2 * cfg.beta_d) / math.gamma(1 - cfg.beta_d) ** 2)
    fluct = simulate_arfima(T, cfg.beta_d, rng, size=K * N) / sd_theory
    betas = base[None] + cfg.beta_scale * fluct.T.reshape(T, K, N)

    # residual sector blocks
    hs = _har_logvar(rng, S, T, cfg.persistence, cfg.vol_of_vol)
    offsets = 0.25 * rng.standard_normal(N)
    vol_e = np.empty((T, N))
    for s, idx in enumerate(sectors.blocks()):
        vol_e[:, idx] = cfg.idio_vol * np.exp((hs[:, [s]] + offsets[idx]) / 2.0)
    blocks = []
    for idx in sectors.blocks():
        m = idx.size
        rho = cfg.block_strength * np.ones((m, m)) + (1 - cfg.block_strength) * np.eye(m)
        v = vol_e[:, idx]
        blocks.append(rho[None] * v[:, :, None] * v[:, None, :])
    residual = np.stack([block_assemble([b[t] for b in blocks], sectors) for t in range(T)])

    latent = np.einsum("tki,tkl,tlj->tij", betas, sigma_f, betas, optimize=True) + residual
    latent = 0.5 * (latent + latent.swapaxes(1, 2))

    # measurement error and repair
    A = rng.standard_normal((T, N, N))
    G = (A + A.swapaxes(1, 2)) / math.sqrt(2.0 * N)
    sd = np.sqrt(np.diagonal(latent, axis1=1, axis2=2))
    observed = latent + cfg.noise_scale * G * sd[:, :, None] * sd[:, None, :]
    for t in range(T):
        floor = 1e-6 * np.trace(latent[t]) / N
        observed[t] = psd_project(observed[t], floor)

    # returns from the observed covariance
    z = rng.standard_normal((T, N))
    chol = np.linalg.cholesky(observed)
    returns = np.einsum("tij,tj->ti", chol, z)

    dates = np.busday_offset(np.datetime64(START_DATE, "D"), np.arange(T), roll="forward")
    assets = tuple(f"A{i:03d}" for i in range(N))
    panel = CovPanel(dates, assets, vech_many(observed))
    rets = ReturnsPanel(dates, assets, returns, np.full(T, cfg.risk_free))
    truth = SynthTruth(sigma_f, betas, residual, vech_many(latent))
    return panel, rets, spec, sectors, truth
