"""Heston laboratory: path simulation, semi-analytic pricing, first-order VaR.

The pricer works under null rates (forward = spot, discount factor 1) with the
rotation-stable characteristic function: the usual branch-sensitive quantity
beta - d is evaluated through the rationalized form -xi^2 (iu + u^2)/(beta + d),
which stays continuous for all u and remains accurate down to xi -> 0.
Integration is composite Gauss-Legendre with panel doubling until the price
moves by less than the tolerance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import bs
from .portfolio import Portfolio

_LEGGAUSS_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


class IntegrationError(RuntimeError):
    """Characteristic-function integral failed to converge."""


@dataclass(frozen=True)
class HestonParams:
    kappa: float            # mean-reversion speed (1/years)
    theta: float            # long-run variance
    xi: float               # vol-of-vol
    rho: float              # spot/variance correlation
    alpha: float = 0.0      # real-world drift
    s0: float = 100.0
    v0: float = 0.04
    dt: float = 0.1 / 365.0  # Euler step (years)

    def __post_init__(self):
        if min(self.kappa, self.theta, self.s0, self.v0, self.dt) <= 0 or self.xi < 0:
            raise ValueError("kappa, theta, s0, v0, dt must be positive; xi >= 0")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [-1, 1]")


# S&P500 calibration used throughout the experiments (kappa, sqrt(theta), xi, rho)
# = (6.169, 0.16168, 0.477, -0.781) with S0 = 2054 and sqrt(v0) = 0.15562.
SP500_PARAMS = HestonParams(kappa=6.169, theta=0.16168 ** 2, xi=0.477, rho=-0.781,
                            alpha=0.0, s0=2054.0, v0=0.15562 ** 2)


def simulate_paths(params: HestonParams, n_days: int, seed: int, n_paths: int = 1,
                   day: float = 1.0 / 365.0, log_euler: bool = False):
    """Daily (S, v) series from a fine-step full-truncation Euler scheme.

    Variance negativity is handled by full truncation: v^+ enters both the
    drift and the diffusion while the stored variance may stay negative until
    mean reversion pulls it back.  Returns (S, v, diagnostics) where S and v
    have shape (n_paths, n_days + 1) and diagnostics carries the fraction of
    truncated variance steps.
    """
    stride = max(int(round(day / params.dt)), 1)
    dt = day / stride
    n_steps = n_days * stride
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    s = np.full(n_paths, params.s0)
    v = np.full(n_paths, params.v0)
    S = np.empty((n_paths, n_days + 1))
    V = np.empty((n_paths, n_days + 1))
    S[:, 0], V[:, 0] = s, v
    sq_dt = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - params.rho ** 2)
    truncated = 0
    for step in range(1, n_steps + 1):
        z = rng.standard_normal((2, n_paths))
        x0 = z[0]
        x1 = params.rho * z[0] + rho_c * z[1]
        vp = np.maximum(v, 0.0)
        truncated += int(np.count_nonzero(v < 0.0))
        sq_vp = np.sqrt(vp)
        if log_euler:
            s = s * np.exp((params.alpha - 0.5 * vp) * dt + sq_vp * sq_dt * x0)
        else:
            s = s * (1.0 + params.alpha * dt + sq_vp * sq_dt * x0)
        v = v + params.kappa * (params.theta - vp) * dt + params.xi * sq_vp * sq_dt * x1
        if step % stride == 0:
            i = step // stride
            S[:, i], V[:, i] = s, v
    diag = {"truncated_fraction": truncated / float(n_steps * n_paths)}
    return S, V, diag


def _cd_terms(u, tau, kappa, theta, xi, rho):
    """C(u), D(u) with E[exp(iu log(S_tau / F))] = exp(C + D v0) (martingale spot).

    Independent of the variance state, so one (u, tau) grid serves every day of
    a simulated path.
    """
    u = np.asarray(u, dtype=complex)
    beta = kappa - 1j * rho * xi * u
    lam = u * 1j + u * u          # iu + u^2
    d = np.sqrt(beta * beta + xi * xi * lam)
    bpd = beta + d
    # beta - d rationalized: exact and free of cancellation for small xi
    bmd_over_xi2 = -lam / bpd
    g = xi * xi * bmd_over_xi2 / bpd
    emdt = np.exp(-d * tau)
    D = bmd_over_xi2 * (1.0 - emdt) / (1.0 - g * emdt)
    C = kappa * theta * (bmd_over_xi2 * tau
                         - (2.0 / (xi * xi)) * np.log((1.0 - g * emdt) / (1.0 - g)))
    return C, D


def _charfn(u, tau, kappa, theta, xi, rho, v0):
    C, D = _cd_terms(u, tau, kappa, theta, xi, rho)
    return np.exp(C + D * v0)


def _bs_limit_price(params: HestonParams, strikes, tau, s0, v0):
    """Deterministic-variance limit xi = 0: Black-Scholes at the integrated variance."""
    w = params.theta * tau + (v0 - params.theta) * (1.0 - np.exp(-params.kappa * tau)) \
        / params.kappa
    sig = np.sqrt(max(w, 0.0) / tau)
    k = np.log(np.asarray(strikes, float) / s0)
    return bs.price_kernel(k, tau, +1, s0, 1.0, sig)


def _leggauss(n):
    if n not in _LEGGAUSS_CACHE:
        _LEGGAUSS_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _LEGGAUSS_CACHE[n]


def _panel_grid(u_max, n_panels):
    edges = np.linspace(0.0, u_max, n_panels + 1)
    xg, wg = _leggauss(16)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    u = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    w = (half[:, None] * wg[None, :]).ravel()
    return u, w


def _probs_on_grid(x, u, w, f1, f2):
    e = np.exp(1j * np.outer(u, x))
    wu = w / u
    p1 = 0.5 + np.imag(e.T @ (f1 * wu)) / np.pi
    p2 = 0.5 + np.imag(e.T @ (f2 * wu)) / np.pi
    return p1, p2


def _integrate_probs(x, tau, kappa, theta, xi, rho, v0, tol):
    """P1, P2 arrays for x = log(F/K) via adaptive composite Gauss-Legendre.

    Panel count doubles until the probabilities are stable to tol; caller gets
    the converged grid back for reuse on further strikes.
    """
    u_max = 256.0
    while True:
        f2_tail = abs(_charfn(np.array([u_max]), tau, kappa, theta, xi, rho, v0)[0])
        f1_tail = abs(_charfn(np.array([u_max - 1j]), tau, kappa, theta, xi, rho, v0)[0])
        if max(f1_tail, f2_tail) / u_max < 1e-16:
            break
        u_max *= 1.6
        if u_max > 2e5:
            raise IntegrationError("characteristic function tail does not decay")

    max_x = float(np.max(np.abs(x))) if np.size(x) else 0.0
    n_panels = max(8, int(np.ceil(u_max / 64.0)), int(np.ceil(u_max * max_x / 15.0)))
    prev = None
    for _ in range(7):
        u, w = _panel_grid(u_max, n_panels)
        f2 = _charfn(u, tau, kappa, theta, xi, rho, v0)
        f1 = _charfn(u - 1j, tau, kappa, theta, xi, rho, v0)
        p1, p2 = _probs_on_grid(x, u, w, f1, f2)
        if prev is not None and max(np.max(np.abs(p1 - prev[0])),
                                    np.max(np.abs(p2 - prev[1]))) < tol:
            return p1, p2, (u, w, f1, f2)
        prev = (p1, p2)
        n_panels *= 2
    raise IntegrationError(f"no convergence with {n_panels // 2} panels "
                           f"(u_max={u_max:.1f}, tau={tau:.4g})")


class CachedPricer:
    """Reusable characteristic-function grid for one (tau, v0) state.

    Converges the integration once on probe moneyness values spanning x_span,
    then prices arbitrary strike batches with two dot products each.  The day
    loops of the laboratory lean on this: the characteristic function does not
    depend on the strike.
    """

    def __init__(self, params: HestonParams, tau: float, v0: float | None = None,
                 tol: float = 1e-9, x_span: float = 0.6):
        self.params = params
        self.tau = float(tau)
        self.v0 = max(params.v0 if v0 is None else v0, 0.0)
        self._grid = None
        if params.xi >= 1e-8:
            probes = np.array([-x_span, -0.5 * x_span, 0.0, 0.5 * x_span, x_span])
            _, _, self._grid = _integrate_probs(
                probes, self.tau, params.kappa, params.theta, params.xi,
                params.rho, self.v0, tol)

    def prices(self, s0: float, strikes) -> np.ndarray:
        strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
        if self._grid is None:
            return _bs_limit_price(self.params, strikes, self.tau, s0, self.v0)
        p1, p2 = _probs_on_grid(np.log(s0 / strikes), *self._grid)
        out = s0 * p1 - strikes * p2
        return np.clip(out, np.maximum(s0 - strikes, 0.0), s0)

    def smile(self, s0: float, ks) -> np.ndarray:
        """Implied vols at log-forward moneyness values (null rates)."""
        ks = np.atleast_1d(np.asarray(ks, dtype=float))
        prices = self.prices(s0, s0 * np.exp(ks))
        return _invert_smile(prices, ks, self.tau, s0)



def _invert_smile(prices, ks, tau, s0, sigma0=None):
    """IV inversion with prices clamped into the open no-arbitrage interval.

    Near-zero variance states push far-wing prices onto their bounds to within
    double precision; the clamp maps them to a small positive implied vol
    instead of failing the inversion.
    """
    ks = np.asarray(ks, dtype=float)
    eps = 1e-13 * s0
    lower = s0 * np.maximum(1.0 - np.exp(ks), 0.0)
    clamped = np.clip(prices, lower + eps, s0 - eps)
    return bs.implied_vol_vec(clamped, ks, tau, +1, s0, 1.0, sigma0=sigma0)


class MaturityIntegrator:
    """One maturity's integration grid, reusable across variance states.

    The C/D terms depend on (u, tau) only, so a day's characteristic function
    is a single complex exponential exp(C + D v).  The grid resolution is
    calibrated once with the adaptive route at both ends of the expected
    variance range (slow tail decay at the low end, fastest u-variation at the
    high end) and the finer of the two is kept.
    """

    def __init__(self, params: HestonParams, tau: float, v_lo: float, v_hi: float,
                 tol: float = 1e-9, x_span: float = 0.6):
        if params.xi < 1e-8:
            raise ValueError("use the deterministic-variance limit for xi ~ 0")
        self.params = params
        self.tau = float(tau)
        probes = np.array([-x_span, -0.5 * x_span, 0.0, 0.5 * x_span, x_span])
        grid = None
        for v in (max(v_lo, 0.0), max(v_hi, v_lo, 0.0)):
            _, _, cand = _integrate_probs(probes, self.tau, params.kappa,
                                          params.theta, params.xi, params.rho,
                                          v, tol)
            if grid is None or len(cand[0]) > len(grid[0]):
                grid = cand
        self.u, self.w = grid[0], grid[1]
        self.c2, self.d2 = _cd_terms(self.u, self.tau, params.kappa, params.theta,
                                     params.xi, params.rho)
        self.c1, self.d1 = _cd_terms(self.u - 1j, self.tau, params.kappa,
                                     params.theta, params.xi, params.rho)

    def state(self, v: float) -> "StatePricer":
        v = max(v, 0.0)
        f2 = np.exp(self.c2 + self.d2 * v)
        f1 = np.exp(self.c1 + self.d1 * v)
        return StatePricer(self.tau, self.u, self.w, f1, f2)

    def moneyness_kernel(self, ks) -> np.ndarray:
        """exp(iu x) matrix for fixed log-forward moneyness columns (x = -k).

        With strikes pegged to the forward (K = F e^k) the oscillatory factor
        never changes, so a day's smile costs two matvecs.
        """
        return np.exp(1j * np.outer(self.u, -np.asarray(ks, dtype=float)))

    def smile_fixed_k(self, kernel, v: float, s0: float, ks, sigma0=None):
        f2 = np.exp(self.c2 + self.d2 * v)
        f1 = np.exp(self.c1 + self.d1 * v)
        wu = self.w / self.u
        p1 = 0.5 + np.imag(kernel.T @ (f1 * wu)) / np.pi
        p2 = 0.5 + np.imag(kernel.T @ (f2 * wu)) / np.pi
        ks = np.asarray(ks, dtype=float)
        strikes = s0 * np.exp(ks)
        prices = np.clip(s0 * p1 - strikes * p2, np.maximum(s0 - strikes, 0.0), s0)
        return _invert_smile(prices, ks, self.tau, s0, sigma0=sigma0)


@dataclass(frozen=True)
class StatePricer:
    """Prices strike batches for one (tau, v) market state (null rates)."""

    tau: float
    u: np.ndarray
    w: np.ndarray
    f1: np.ndarray
    f2: np.ndarray

    def prices(self, s0: float, strikes) -> np.ndarray:
        strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
        p1, p2 = _probs_on_grid(np.log(s0 / strikes), self.u, self.w, self.f1,
                                self.f2)
        out = s0 * p1 - strikes * p2
        return np.clip(out, np.maximum(s0 - strikes, 0.0), s0)

    def smile(self, s0: float, ks, sigma0=None) -> np.ndarray:
        ks = np.atleast_1d(np.asarray(ks, dtype=float))
        prices = self.prices(s0, s0 * np.exp(ks))
        return _invert_smile(prices, ks, self.tau, s0, sigma0=sigma0)


def call_price(params: HestonParams, strike, tau, *, s0: float | None = None,
               v0: float | None = None, tol: float = 1e-9):
    """Semi-analytic call price(s) under null rates; strike may be an array.

    Absolute accuracy target 1e-6 * s0 (internal tolerance is tighter).
    xi below 1e-8 switches to the exact deterministic-variance limit.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s0 = params.s0 if s0 is None else s0
    v0 = params.v0 if v0 is None else v0
    v0 = max(v0, 0.0)
    strikes = np.atleast_1d(np.asarray(strike, dtype=float))
    if params.xi < 1e-8:
        out = _bs_limit_price(params, strikes, tau, s0, v0)
    else:
        x = np.log(s0 / strikes)
        p1, p2, _ = _integrate_probs(x, tau, params.kappa, params.theta, params.xi,
                                     params.rho, v0, tol)
        out = s0 * p1 - strikes * p2
        intrinsic = np.maximum(s0 - strikes, 0.0)
        out = np.clip(out, intrinsic, s0)
    return float(out[0]) if np.ndim(strike) == 0 else out


def smile_vol(params: HestonParams, k, tau, *, s0: float | None = None,
              v0: float | None = None):
    """Implied vol(s) at log-forward moneyness k (array ok) under null rates."""
    s0 = params.s0 if s0 is None else s0
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    strikes = s0 * np.exp(k_arr)
    prices = call_price(params, strikes, tau, s0=s0, v0=v0)
    vols = bs.implied_vol_vec(np.atleast_1d(prices), k_arr, tau, +1, s0, 1.0)
    return float(vols[0]) if np.ndim(k) == 0 else vols


def mc_call_price(params: HestonParams, strike, tau, n_paths: int, seed: int):
    """Antithetic Monte-Carlo price with standard error, used as a pricing oracle."""
    n_steps = max(int(round(tau / params.dt)), 1)
    dt = tau / n_steps
    half = (n_paths + 1) // 2
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    pricing = replace(params, alpha=0.0)
    s = np.full(half, pricing.s0)
    sa = np.full(half, pricing.s0)
    v = np.full(half, pricing.v0)
    va = np.full(half, pricing.v0)
    sq_dt = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - pricing.rho ** 2)
    for _ in range(n_steps):
        z = rng.standard_normal((2, half))
        for sign, (ss, vv) in zip((1.0, -1.0), ((s, v), (sa, va))):
            x0 = sign * z[0]
            x1 = pricing.rho * x0 + rho_c * sign * z[1]
            vp = np.maximum(vv, 0.0)
            sq_vp = np.sqrt(vp)
            ss *= 1.0 + sq_vp * sq_dt * x0
            vv += pricing.kappa * (pricing.theta - vp) * dt + pricing.xi * sq_vp * sq_dt * x1
    payoff = 0.5 * (np.maximum(s - strike, 0.0) + np.maximum(sa - strike, 0.0))
    price = float(np.mean(payoff))
    se = float(np.std(payoff, ddof=1) / np.sqrt(half))
    return price, se


def fd_portfolio_sensitivities(pricer, portfolio: Portfolio, s: float, v: float,
                               eps_s: float, eps_v: float):
    """(dPi/dS, dPi/dv) as averages of forward and backward finite differences.

    pricer(portfolio, s, v) must return the portfolio value.  eps_v shrinks
    with a warning when v - eps_v would go non-positive.
    """
    if eps_s <= 0 or eps_v <= 0:
        raise ValueError("bump sizes must be positive")
    if v - eps_v <= 0:
        eps_v = 0.5 * v
        warnings.warn(f"eps_v shrunk to {eps_v:.3g} to keep the variance positive",
                      stacklevel=2)
    d_s = (pricer(portfolio, s + eps_s, v) - pricer(portfolio, s - eps_s, v)) / (2 * eps_s)
    d_v = (pricer(portfolio, s, v + eps_v) - pricer(portfolio, s, v - eps_v)) / (2 * eps_v)
    return float(d_s), float(d_v)


def sv_var(sensitivities, s: float, v: float, params: HestonParams, theta: float,
           h: float) -> float:
    """First-order stochastic-volatility VaR (negative in the loss convention).

    Phi^{-1}(1-theta) sqrt(s^2 v dS^2 + xi^2 v dV^2 + 2 rho xi s v dS dV) sqrt(h).
    """
    d_s, d_v = sensitivities
    rad = (s * s * v * d_s * d_s + params.xi ** 2 * v * d_v * d_v
           + 2.0 * params.rho * params.xi * s * v * d_s * d_v)
    assert rad > -1e-12 * max(1.0, s * s * v), "radicand cannot be negative for |rho|<=1"
    return float(bs.norm_ppf(1.0 - theta) * np.sqrt(max(rad, 0.0)) * np.sqrt(h))


def portfolio_price(params: HestonParams, portfolio: Portfolio, s: float, v: float) -> float:
    """Portfolio value under null rates: Heston calls, parity puts, spot, cash."""
    total = portfolio.cash + portfolio.spot_quantity * s
    q, w, K, t = portfolio.arrays()
    for tau in np.unique(t):
        sel = t == tau
        calls = call_price(params, K[sel], float(tau), s0=s, v0=v)
        prices = np.where(w[sel] > 0, calls, calls - (s - K[sel]))
        total += float(np.dot(q[sel], prices))
    return float(total)
