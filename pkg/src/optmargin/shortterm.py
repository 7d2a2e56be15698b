"""Closed short-term VaR for option portfolios, Gaussian and t-Student variants.

The portfolio exposure collapses into two scalars:

    c = beta * (S * sum_i pi_i delta_i  -  sum_i pi_i vega_i d_k sigma_i)
    q = sum_i pi_i zeta_i vega_i

with beta the spot vol, zeta_i the vol-of-vol at the option's (k, tau) and
d_k sigma_i the smile slope.  The Gaussian VaR is
Phi^{-1}(1 - theta) sqrt(c^2 + q^2 + 2 rho c q) sqrt(h); the t-variant replaces
the Gaussian quantile by the empirical quantile of the mixed variable Z.
VaR values are negative in the loss convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import t as student_t

from . import bs, mc
from .estimators import empirical_quantile
from .portfolio import Portfolio

DEFAULT_T_DRAWS = 200_000


class DegenerateCoefficientsError(ValueError):
    """c^2 + q^2 + 2 rho c q = 0: Z is undefined and the VaR is 0."""


@dataclass(frozen=True)
class ShortTermParams:
    beta: float                                   # spot vol, per sqrt(year)
    rho: float                                    # spot/IV correlation
    theta: float                                  # confidence level in (0.5, 1)
    h: float                                      # MPOR in years
    zeta_of: Callable[[float, float], float]      # (k, tau) -> vol-of-vol
    nu: float | None = None                       # t degrees of freedom (> 2)

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [-1, 1]")
        if not 0.5 < self.theta < 1.0:
            raise ValueError("theta must be in (0.5, 1)")
        if self.beta < 0 or self.h <= 0:
            raise ValueError("need beta >= 0 and h > 0")
        if self.nu is not None and self.nu <= 2:
            raise ValueError("nu must exceed 2 so the variance exists")


@dataclass(frozen=True)
class ExposureCoeffs:
    c: float
    q: float


def exposure_coeffs(portfolio: Portfolio, spot: float, surface,
                    params: ShortTermParams) -> ExposureCoeffs:
    """Collapse the portfolio into the delta-channel and vol-channel exposures.

    surface must provide vol(tau, k), slope(tau, k) and a term structure
    (SurfaceGrid works; so does any view with the same methods).  Greeks are
    Black-Scholes at the position's implied vol.
    """
    term = surface.term
    slope_of = getattr(surface, "slope", None)
    if slope_of is None:
        from .marketdata import smile_slope
        slope_of = lambda tau, k: smile_slope(surface, tau, k)
    sum_delta = portfolio.spot_quantity
    sum_vega_slope = 0.0
    q = 0.0
    for idx, pos in enumerate(portfolio):
        fwd = spot * float(term.fwd_ratio(pos.tau))
        df = float(term.discount(pos.tau))
        k = np.log(pos.strike / fwd)
        sig = float(surface.vol(pos.tau, k))
        if not np.isfinite(sig) or sig <= 0:
            raise ValueError(f"no usable implied vol for position {idx} "
                             f"(K={pos.strike}, tau={pos.tau})")
        delta, vega = bs.greeks(bs.QuoteContext(k, pos.tau, pos.omega, fwd, df, sig))
        sum_delta += pos.quantity * delta
        sum_vega_slope += pos.quantity * vega * float(slope_of(pos.tau, k))
        q += pos.quantity * params.zeta_of(k, pos.tau) * vega
    c = params.beta * (spot * sum_delta - sum_vega_slope)
    return ExposureCoeffs(float(c), float(q))


def _scale(coeffs: ExposureCoeffs, rho: float) -> float:
    s2 = coeffs.c ** 2 + coeffs.q ** 2 + 2.0 * rho * coeffs.c * coeffs.q
    return np.sqrt(max(s2, 0.0))


def gaussian_var(coeffs: ExposureCoeffs, params: ShortTermParams) -> float:
    """Closed Gaussian short-term VaR (negative in the loss convention)."""
    return float(bs.norm_ppf(1.0 - params.theta) * _scale(coeffs, params.rho)
                 * np.sqrt(params.h))


def sample_Z(c: float, q: float, rho: float, nu: float, n: int, seed: int,
             n_workers: int = 1) -> np.ndarray:
    """Draws of Z = (q sqrt(1-rho^2) X + (c + q rho) Y) / sqrt(c^2+q^2+2 rho c q).

    X is standard normal; Y is a standard t(nu) produced from a second normal
    through the uniform-inverse-CDF route.  Coefficients enter through their
    absolute values, which leaves the distribution unchanged (X and Y are
    symmetric and independent) and makes +/- portfolio results exactly equal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if nu <= 2:
        raise ValueError("nu must exceed 2")
    s = np.sqrt(max(c * c + q * q + 2.0 * rho * c * q, 0.0))
    if s == 0.0:
        raise DegenerateCoefficientsError("c^2 + q^2 + 2 rho c q = 0; VaR is 0")
    a = abs(q) * np.sqrt(max(1.0 - rho * rho, 0.0))
    b = abs(c + q * rho)
    draws = mc.standard_normals(seed, n, 2, n_workers=n_workers)
    x = draws[:, 0]
    y = student_t.ppf(bs.norm_cdf(draws[:, 1]), nu)
    return (a * x + b * y) / s


def tstudent_var(coeffs: ExposureCoeffs, params: ShortTermParams,
                 n_draws: int = DEFAULT_T_DRAWS, seed: int = 0,
                 n_workers: int = 1) -> float:
    """t-Student short-term VaR via the empirical quantile of Z."""
    if params.nu is None:
        raise ValueError("params.nu is required for the t-Student variant")
    s = _scale(coeffs, params.rho)
    if s == 0.0:
        return 0.0
    z = sample_Z(coeffs.c, coeffs.q, params.rho, params.nu, n_draws, seed,
                 n_workers=n_workers)
    return float(empirical_quantile(z, 1.0 - params.theta) * s * np.sqrt(params.h))


class ZQuantileTable:
    """Precomputed (1-theta)-quantile of Z = a X + b Y over |b| in [0, 1].

    Since a^2 + b^2 = 1 for the normalized Z, the quantile is a one-parameter
    family; a backtest evaluates thousands of (c, q, rho) tuples per day and
    interpolating one table built from a single big seeded sample is far
    cheaper than resampling, at identical MC accuracy.
    """

    def __init__(self, nu: float, theta: float, n: int = 400_000, seed: int = 0,
                 grid_size: int = 201):
        draws = mc.standard_normals(seed, n, 2)
        x = draws[:, 0]
        y = student_t.ppf(bs.norm_cdf(draws[:, 1]), nu)
        self.b_grid = np.linspace(0.0, 1.0, grid_size)
        p = 1.0 - theta
        self.q_grid = np.array([
            empirical_quantile(np.sqrt(max(1.0 - b * b, 0.0)) * x + b * y, p)
            for b in self.b_grid])
        self.nu, self.theta = nu, theta

    def quantile(self, c: float, q: float, rho: float) -> float:
        s = np.sqrt(max(c * c + q * q + 2.0 * rho * c * q, 0.0))
        if s == 0.0:
            return 0.0
        b = min(abs(c + q * rho) / s, 1.0)
        return float(np.interp(b, self.b_grid, self.q_grid))

    def var(self, coeffs: ExposureCoeffs, params: ShortTermParams) -> float:
        s = _scale(coeffs, params.rho)
        return float(self.quantile(coeffs.c, coeffs.q, params.rho) * s
                     * np.sqrt(params.h))
