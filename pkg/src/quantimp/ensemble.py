"""Quantile losses, ensemble aggregation, and predictive quantiles.

All functions are pure and broadcast over numpy arrays. Two pinball
orientations exist side by side on purpose:

* :func:`pinball` puts weight ``q`` on over-prediction (the case form used
  for per-member loss bookkeeping and its max-form twin),
* :func:`quantile_score` puts weight ``q`` on under-prediction, so its
  expectation is minimized by the ``q``-th conditional quantile. This is the
  orientation the training objective and the CRPS integrand use.
"""

from typing import NamedTuple

import numpy as np

# Preset quantile level sets (5 / 9 / 19 members).
PRESETS = {
    "Q1": np.array([0.1, 0.25, 0.5, 0.75, 0.9]),
    "Q2": np.round(np.arange(1, 10) * 0.1, 10),
    "Q3": np.round(np.arange(1, 20) * 0.05, 10),
}

# Fixed evaluation grid for discretized CRPS, independent of the training
# preset so scores stay comparable across preset ablations.
CRPS_GRID = np.round(np.arange(1, 20) * 0.05, 10)


def resolve_levels(spec):
    """Turn a preset name or an explicit sequence into a validated array.

    Levels must be strictly increasing and inside (0, 1).
    """
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ValueError(f"unknown quantile preset {spec!r}; "
                             f"choose from {sorted(PRESETS)}")
        return PRESETS[spec].copy()
    q = np.asarray(spec, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("quantile levels must be a non-empty 1-D sequence")
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")
    if np.any(np.diff(q) <= 0.0):
        raise ValueError("quantile levels must be strictly increasing")
    return q


def pinball(x_pred, y, q):
    """Case-form pinball: q*(x-y) if x >= y else (1-q)*(y-x)."""
    x_pred = np.asarray(x_pred, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(x_pred >= y, q * (x_pred - y), (1.0 - q) * (y - x_pred))


def pinball_max_form(x_pred, y, q):
    """Max-form pinball, identical to :func:`pinball` term by term."""
    x_pred = np.asarray(x_pred, dtype=float)
    y = np.asarray(y, dtype=float)
    return (q * np.abs(np.maximum(x_pred - y, 0.0))
            + (1.0 - q) * np.abs(np.maximum(0.0, y - x_pred)))


def quantile_score(x_pred, y, q):
    """Pinball with q weighting under-prediction; minimized at the
    q-th quantile of y. Twice its integral over q in (0, 1) is the CRPS."""
    x_pred = np.asarray(x_pred, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(y >= x_pred, q * (y - x_pred), (1.0 - q) * (x_pred - y))


class MaskedQuantileLoss(NamedTuple):
    raw: float
    normalized: float
    n_obs: int

    @property
    def empty_support(self) -> bool:
        return self.n_obs == 0


def masked_quantile_loss(x, m, v_heads, quantiles):
    """Summed quantile loss of N head estimates against observed cells.

    ``v_heads`` has shape (N, T, K); head ``i`` is scored at level
    ``quantiles[i]`` in the under-prediction orientation and only where
    ``m`` is 1. Returns the raw sum and the sum normalized by
    ``N * #observed`` (both 0, flagged, when nothing is observed).
    """
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    v_heads = np.asarray(v_heads, dtype=float)
    q = np.asarray(quantiles, dtype=float).reshape(-1, *([1] * x.ndim))
    if v_heads.shape[0] != q.shape[0]:
        raise ValueError("one quantile level per head required")
    terms = quantile_score(v_heads, x[None, ...], q) * m[None, ...]
    raw = float(np.sum(terms))
    n_obs = int(round(float(np.sum(m))))
    if n_obs == 0:
        return MaskedQuantileLoss(0.0, 0.0, 0)
    return MaskedQuantileLoss(raw, raw / (q.shape[0] * n_obs), n_obs)


def aggregate_mixture(member_means, member_vars):
    """Moments of the uniform mixture of N member Gaussians.

    Means/vars carry the member axis first; trailing axes broadcast. The
    aggregate variance is clamped at 0 (it can undershoot by ~1e-12 in
    float arithmetic when all members agree).
    """
    u = np.asarray(member_means, dtype=float)
    s2 = np.asarray(member_vars, dtype=float)
    if u.shape[0] == 0:
        raise ValueError("need at least one ensemble member")
    if np.any(s2 < 0.0):
        raise ValueError("member variances must be nonnegative")
    agg_mean = np.mean(u, axis=0)
    agg_var = np.mean(s2 + u * u, axis=0) - agg_mean * agg_mean
    return agg_mean, np.maximum(agg_var, 0.0)


def gaussian_nll(agg_var, quantile_losses, var_floor=1e-6):
    """Heteroscedastic Gaussian negative log-likelihood.

    log(var)/2 + mean(member quantile losses)/(2 var), with the variance
    floored so observed positions (where all heads agree exactly) stay
    finite.
    """
    v = np.maximum(np.asarray(agg_var, dtype=float), var_floor)
    mean_loss = np.mean(np.asarray(quantile_losses, dtype=float), axis=0)
    return 0.5 * np.log(v) + mean_loss / (2.0 * v)


# Rational approximation of the standard normal quantile function
# (P. Acklam), |relative error| < 1.15e-9 on (0, 1).
_NDTRI_A = (-3.969683028665376e+01, 2.209460984245205e+02,
            -2.759285104469687e+02, 1.383577518672690e+02,
            -3.066479806614716e+01, 2.506628277459239e+00)
_NDTRI_B = (-5.447609879822406e+01, 1.615858368580409e+02,
            -1.556989798598866e+02, 6.680131188771972e+01,
            -1.328068155288572e+01)
_NDTRI_C = (-7.784894002430293e-03, -3.223964580411365e-01,
            -2.400758277161838e+00, -2.549732539343734e+00,
            4.374664141464968e+00, 2.938163982698783e+00)
_NDTRI_D = (7.784695709041462e-03, 3.224671290700398e-01,
            2.445134137142996e+00, 3.754408661907416e+00)
_NDTRI_PLOW = 0.02425


def normal_quantile(p):
    """Inverse standard normal CDF, elementwise; |error| < 1e-8."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    a, b, c, d = _NDTRI_A, _NDTRI_B, _NDTRI_C, _NDTRI_D
    out = np.empty_like(p)

    lo = p < _NDTRI_PLOW
    hi = p > 1.0 - _NDTRI_PLOW
    mid = ~(lo | hi)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        out[mid] = num * q / den
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[lo] = num / den
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log(1.0 - p[hi]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[hi] = -num / den
    return out if out.ndim else float(out)


def predictive_quantile(agg_mean, agg_var, q):
    """q-th quantile of the Gaussian predictive N(agg_mean, agg_var)."""
    agg_var = np.asarray(agg_var, dtype=float)
    if np.any(agg_var < 0.0):
        raise ValueError("aggregate variance must be nonnegative")
    return np.asarray(agg_mean, dtype=float) + np.sqrt(agg_var) * normal_quantile(q)


def fit_gaussian_to_quantiles(head_values, levels):
    """Least-squares Gaussian fit to head outputs at their nominal levels.

    Solves y_i ~ u + sigma * z_i with z_i the standard normal quantile of
    level i; sigma is clamped at 0. Head axis first; trailing axes
    broadcast. Falls back to a point mass for a single head.
    """
    y = np.asarray(head_values, dtype=float)
    levels = np.asarray(levels, dtype=float)
    if y.shape[0] != levels.shape[0]:
        raise ValueError("one level per head required")
    if y.shape[0] < 2:
        return y[0], np.zeros_like(y[0])
    z = normal_quantile(levels)
    zc = z - z.mean()
    denom = float(np.sum(zc * zc))
    ybar = np.mean(y, axis=0)
    zc_ = zc.reshape(-1, *([1] * (y.ndim - 1)))
    sigma = np.maximum(np.sum(zc_ * (y - ybar), axis=0) / denom, 0.0)
    u = ybar - sigma * z.mean()
    return u, sigma * sigma


def ensemble_stats(head_values, levels, variance_mode="dispersion"):
    """Predictive (mean, variance) per cell from per-head estimates.

    ``dispersion`` treats each head as a point mass, so the variance is the
    spread of head outputs; ``fit_gaussian_to_quantiles`` maps the heads
    back through their nominal levels instead.
    """
    y = np.asarray(head_values, dtype=float)
    if variance_mode == "dispersion":
        return aggregate_mixture(y, np.zeros_like(y))
    if variance_mode == "fit_gaussian_to_quantiles":
        return fit_gaussian_to_quantiles(y, levels)
    raise ValueError(f"unknown variance_mode {variance_mode!r}")
