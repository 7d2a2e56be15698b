"""Black-Scholes pricing, implied volatility and the greeks feeding the VaR formulas.

Everything is expressed in forward terms: quotes carry the log-forward
moneyness k = log(K / F), the time-to-maturity tau in years, the forward
level and the discount factor.  omega is +1 for a call, -1 for a put.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

VOL_BRACKET = (1e-8, 5.0)
MAX_IV_ITER = 100


class DomainError(ValueError):
    """Pricing inputs outside the valid domain (non-finite or negative)."""


class DegenerateInputError(ValueError):
    """Greeks requested at zero volatility."""


class PriceBoundError(ValueError):
    """Price at or outside the no-arbitrage bounds.

    side is "below_intrinsic" or "above_upper".
    """

    def __init__(self, message: str, side: str):
        super().__init__(message)
        self.side = side


def norm_cdf(x):
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def norm_ppf(p):
    """Gaussian quantile: rational approximation polished by one Newton step.

    Quantiles enter VaR outputs directly, so the extra step costs nothing and
    pins the accuracy to the CDF used everywhere else.
    """
    p = np.asarray(p, dtype=float)
    x = ndtri(p)
    d = norm_pdf(x)
    # skip the polish in the far tails where the density underflows
    safe = d > 1e-250
    x = np.where(safe, x - (ndtr(x) - p) / np.where(safe, d, 1.0), x)
    return x if x.ndim else float(x)


@dataclass(frozen=True)
class QuoteContext:
    """One option quote in forward coordinates.  Fields may be numpy arrays."""

    k: float
    tau: float
    omega: int
    forward: float
    discount: float
    sigma: float = 0.0

    def validate(self):
        k, tau, f, df = (np.asarray(v, dtype=float) for v in
                         (self.k, self.tau, self.forward, self.discount))
        omega = np.asarray(self.omega)
        sigma = np.asarray(self.sigma, dtype=float)
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(tau))
                and np.all(np.isfinite(f)) and np.all(np.isfinite(df))):
            raise DomainError("non-finite pricing input")
        if np.any(tau <= 0) or np.any(f <= 0) or np.any(df <= 0) or np.any(df > 1):
            raise DomainError("need tau > 0, forward > 0, discount in (0, 1]")
        if not np.all(np.abs(omega) == 1):
            raise DomainError("omega must be +1 or -1")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise DomainError("sigma must be finite and >= 0")


def _d1_d2(k, tau, sigma):
    st = sigma * np.sqrt(tau)
    d1 = -k / st + 0.5 * st
    return d1, d1 - st


def price_kernel(k, tau, omega, forward, discount, sigma):
    """Vectorized forward-measure price; sigma == 0 returns discounted intrinsic."""
    k, tau, sigma = np.broadcast_arrays(
        np.asarray(k, float), np.asarray(tau, float), np.asarray(sigma, float))
    omega = np.asarray(omega)
    dff = np.asarray(discount, float) * np.asarray(forward, float)
    intrinsic = dff * np.maximum(omega * (1.0 - np.exp(k)), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, d2 = _d1_d2(k, tau, np.where(sigma > 0, sigma, 1.0))
        live = omega * dff * (ndtr(omega * d1) - np.exp(k) * ndtr(omega * d2))
    return np.where(sigma > 0, live, intrinsic)


def bs_price(ctx: QuoteContext):
    ctx.validate()
    out = price_kernel(ctx.k, ctx.tau, ctx.omega, ctx.forward, ctx.discount, ctx.sigma)
    return float(out) if out.ndim == 0 else out


def price_bounds(ctx: QuoteContext):
    """(lower, upper) no-arbitrage price bounds for the quote (sigma ignored)."""
    dff = np.asarray(ctx.discount, float) * np.asarray(ctx.forward, float)
    ek = np.exp(np.asarray(ctx.k, float))
    omega = np.asarray(ctx.omega)
    lower = dff * np.maximum(omega * (1.0 - ek), 0.0)
    upper = np.where(omega > 0, dff, dff * ek)
    return lower, upper


def greeks(ctx: QuoteContext):
    """(delta, vega) of the Black-Scholes price.

    delta = omega * Phi(omega d1); vega = DF * F * phi(d1) * sqrt(tau).
    Rejects sigma == 0: both formulas divide by sigma * sqrt(tau).
    """
    ctx.validate()
    if np.any(np.asarray(ctx.sigma, float) <= 0):
        raise DegenerateInputError("greeks undefined at sigma = 0")
    d1, _ = _d1_d2(np.asarray(ctx.k, float), np.asarray(ctx.tau, float),
                   np.asarray(ctx.sigma, float))
    omega = np.asarray(ctx.omega)
    delta = omega * ndtr(omega * d1)
    vega = np.asarray(ctx.discount, float) * np.asarray(ctx.forward, float) \
        * norm_pdf(d1) * np.sqrt(np.asarray(ctx.tau, float))
    if np.ndim(delta) == 0:
        return float(delta), float(vega)
    return delta, vega


def implied_vol_vec(price, k, tau, omega, forward, discount, sigma0=None,
                    price_tol=1e-10):
    """Vectorized safeguarded Newton on the monotone price map.

    Keeps a [lo, hi] bracket around the root and falls back to bisection
    whenever the Newton step leaves it.  Absolute price tolerance
    price_tol * DF * F; sigma0 is an optional warm start (e.g. yesterday's
    vols).
    """
    price, k, tau = np.broadcast_arrays(np.asarray(price, float),
                                        np.asarray(k, float), np.asarray(tau, float))
    omega = np.broadcast_to(np.asarray(omega), price.shape)
    dff = np.broadcast_to(np.asarray(discount, float) * np.asarray(forward, float),
                          price.shape)
    ek = np.exp(k)
    lower = dff * np.maximum(omega * (1.0 - ek), 0.0)
    upper = np.where(omega > 0, dff, dff * ek)
    if np.any(price <= lower):
        raise PriceBoundError("price at or below intrinsic value", "below_intrinsic")
    if np.any(price >= upper):
        raise PriceBoundError("price at or above upper bound", "above_upper")

    tol = price_tol * dff
    lo = np.full(price.shape, VOL_BRACKET[0])
    hi = np.full(price.shape, VOL_BRACKET[1])
    if sigma0 is None:
        sigma = np.full(price.shape, 0.2)
    else:
        sigma = np.clip(np.broadcast_to(np.asarray(sigma0, float), price.shape),
                        2.0 * VOL_BRACKET[0], 0.5 * VOL_BRACKET[1]).copy()
    sq_tau = np.sqrt(tau)
    vega_floor = 1e-300
    for _ in range(MAX_IV_ITER):
        st = sigma * sq_tau
        d1 = -k / st + 0.5 * st
        p = omega * dff * (ndtr(omega * d1) - ek * ndtr(omega * (d1 - st)))
        err = p - price
        done = np.abs(err) <= tol
        if np.all(done):
            break
        hi = np.where(err > 0, sigma, hi)
        lo = np.where(err < 0, sigma, lo)
        vega = dff * norm_pdf(d1) * sq_tau
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = sigma - err / np.where(vega > vega_floor, vega, 1.0)
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi) | (vega <= vega_floor)
        sigma = np.where(done, sigma, np.where(bad, 0.5 * (lo + hi), cand))
    return sigma


def implied_vol(price: float, ctx: QuoteContext) -> float:
    """Invert bs_price for sigma; ctx.sigma is ignored.

    Raises PriceBoundError when the target price is at or outside the
    no-arbitrage bounds.
    """
    ctx.validate()
    out = implied_vol_vec(price, ctx.k, ctx.tau, ctx.omega, ctx.forward, ctx.discount)
    return float(out) if np.ndim(out) == 0 or out.size == 1 else out
