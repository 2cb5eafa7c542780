"""Uncertainty-aware multivariate time-series imputation.

A bidirectional recurrent imputer whose ensemble of quantile-regression
heads shares one trunk (or, for the ablation, forms a full ensemble of
independent networks), trained jointly on masked reconstruction and
quantile losses and evaluated with masked MAE and a discretized CRPS.
"""

from ._backend import BACKEND
from .data import (MaskSplit, NormStats, TimeSeriesDataset, Window,
                   batch_iter, compute_deltas, fit_normalizer, load_csv,
                   make_mcar_split, make_synthetic, make_windows, normalize,
                   denormalize)
from .ensemble import (CRPS_GRID, PRESETS, aggregate_mixture, ensemble_stats,
                       fit_gaussian_to_quantiles, gaussian_nll,
                       masked_quantile_loss, normal_quantile, pinball,
                       pinball_max_form, predictive_quantile, quantile_score,
                       resolve_levels)
from .evaluation import (crps_discrete, forward_fill, impute_series,
                         linear_interpolate, masked_mae, mean_impute,
                         run_benchmark)
from .imputer import (EnsembleImputer, ImputerDims, bidirectional_impute,
                      directional_pass, load_checkpoint, save_checkpoint)
from .training import (Adam, GradCheckReport, TrainConfig, TrainResult,
                       config_hash, grad_check, total_loss, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
