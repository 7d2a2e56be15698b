"""EWMA volatility/correlation estimators and the vol-of-vol scale factor.

One empirical-quantile convention is used everywhere quantiles appear in the
package (scenario P&Ls, simulated Z quantiles, the scale factor): linear
interpolation between order statistics, i.e. numpy's default "linear" rule.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter


class UndefinedCorrelationError(ValueError):
    """EWMA correlation requested on a zero-variance window."""


@dataclass(frozen=True)
class EwmaConfig:
    lam: float = 0.97
    floor: float = 0.0          # per-step vol floor, applied before annualization
    convention: str = "lagged"  # sigma_s = EWMA_{s-1} ("lagged") or EWMA_s ("current")
    step: float = 1.0 / 252.0   # return horizon h_r in years

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("decay must be in (0, 1)")
        if self.convention not in ("current", "lagged"):
            raise ValueError("convention must be 'current' or 'lagged'")


def _ewma_recursion(x, lam, seed):
    """y_s = (1 - lam) x_s + lam y_{s-1}, y_0 = seed; returns y_1..y_n."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        zi = np.array([lam * seed])
        y, _ = lfilter([1.0 - lam], [1.0, -lam], x, zi=zi)
    else:
        zi = (lam * np.asarray(seed, dtype=float))[None, :]
        y, _ = lfilter([1.0 - lam], [1.0, -lam], x, axis=0, zi=zi)
    return y


def ewma_vol(returns, cfg: EwmaConfig, seed: float | None = None):
    """EWMA volatility series, annualized to per-sqrt(year) by 1/sqrt(step).

    Seeded at |first return| unless a seed is given; the convention shifts the
    series by one step (lagged) or not (current).  Works column-wise on 2-d
    input.
    """
    returns = np.asarray(returns, dtype=float)
    if returns.shape[0] < 1 or returns.size == 0:
        raise ValueError("empty return series")
    seed_vol = np.abs(returns[0]) if seed is None else seed
    var = _ewma_recursion(returns ** 2, cfg.lam, np.asarray(seed_vol) ** 2)
    if cfg.convention == "lagged":
        var = np.concatenate([np.asarray(seed_vol)[None] ** 2 if returns.ndim > 1
                              else np.array([seed_vol ** 2]), var[:-1]], axis=0)
    vol = np.sqrt(var)
    if cfg.floor > 0.0:
        vol = np.maximum(vol, cfg.floor)
    return vol / np.sqrt(cfg.step)


def ewma_corr(a, b, lam: float = 0.97):
    """EWMA correlation series in [-1, 1] between two equal-length series.

    Covariance and variances run on raw products seeded at the first products;
    a window of zero variance leaves the correlation undefined.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series length mismatch")
    if a.size < 2:
        raise ValueError("need at least two observations")
    cov = _ewma_recursion(a * b, lam, a[0] * b[0])
    va = _ewma_recursion(a * a, lam, a[0] * a[0])
    vb = _ewma_recursion(b * b, lam, b[0] * b[0])
    denom = np.sqrt(va * vb)
    if np.any(denom <= 0.0):
        raise UndefinedCorrelationError("zero-variance window in EWMA correlation")
    return np.clip(cov / denom, -1.0, 1.0)


def empirical_quantile(x, p):
    """Package-wide quantile rule: linear interpolation between order statistics."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample")
    return np.quantile(x, p)


def volofvol_factor(ratios, quantile: float = 0.9, multiplier: float = 1.1):
    """Scale factor: multiplier times the empirical quantile of the ratio history.

    The ratios are per-point vol-of-vol divided by the 1M ATM vol-of-vol;
    fewer than 250 observations triggers a warning, an empty history an error.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size == 0:
        raise ValueError("empty ratio history")
    if ratios.size < 250:
        warnings.warn("fewer than 250 ratio observations; factor may be unstable",
                      stacklevel=2)
    return multiplier * empirical_quantile(ratios, quantile)
