"""Forecasting large realized covariance matrices through a factor decomposition.

The forecast combines a HAR system for the factor covariance (optionally on
its matrix logarithm), HAR regressions for the loadings and sector-block
regressions for the residual covariance. Benchmarks, forecast scoring,
minimum-variance backtests and long-memory diagnostics are included.
"""

__version__ = "0.1.0"

from .errors import (AlignmentError, ConfigError, DimensionError, DomainError, InfeasibleError,
                     InsufficientHistoryError, NumericError, ParseError, ValidationError)
from .panel_io import CovPanel, ReturnsPanel, clean_panel, load_panel, load_returns, save_panel, save_returns
from .factor_model import FactorSpec, SectorAssignment, decompose
from .forecaster import ModelConfig, ForecastSet, rolling_forecast
from .evaluation import l2_error, score, selection_stats
from .portfolio import BacktestConfig, ConstraintSet, backtest, constrained_min_var, gmv_weights
from .diagnostics import gph_estimate, local_whittle_estimate, omitted_factor_scan
from .synthetic import SynthConfig, generate_synthetic

__all__ = [
    "AlignmentError", "ConfigError", "DimensionError", "DomainError", "InfeasibleError",
    "InsufficientHistoryError", "NumericError", "ParseError", "ValidationError",
    "CovPanel", "ReturnsPanel", "clean_panel", "load_panel", "load_returns", "save_panel", "save_returns",
    "FactorSpec", "SectorAssignment", "decompose",
    "ModelConfig", "ForecastSet", "rolling_forecast",
    "l2_error", "score", "selection_stats",
    "BacktestConfig", "ConstraintSet", "backtest", "constrained_min_var", "gmv_weights",
    "gph_estimate", "local_whittle_estimate", "omitted_factor_scan",
    "SynthConfig", "generate_synthetic",
]
