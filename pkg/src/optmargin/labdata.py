"""Synthetic market data sources built on a simulated Heston path.

HestonAnchorMarket resolves, for every day and maturity pillar, the strikes of
fixed-delta anchor options (Black-Scholes delta at the model implied vol, the
ATM anchor at k = 0), their implied vols and smile slopes, and the EWMA
estimator series the short-term formulas consume: spot vol, per-anchor
vol-of-vol and the spot/ATM-vol correlation.  Realized P&Ls reprice the same
contracts with the semi-analytic pricer at the horizon date, so VaR and P&L
share one pricing criterion.

GridPanelMarket builds the fixed 17 x 8 implied-vol grid per day; it feeds the
filtered-historical-simulation engine and the grid-based short-term formula
(vol-of-vol through the scale-factor route).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import bs
from .estimators import EwmaConfig, empirical_quantile, ewma_corr, ewma_vol
from .heston import HestonParams, MaturityIntegrator, simulate_paths
from .marketdata import (DAYS_PER_YEAR, DELTA_POINTS, GRID_TAU_DAYS, SurfaceGrid,
                         TermStructure, delta_to_k, smile_slope)
from .portfolio import Portfolio, Position

FIXED_DELTAS = (0.1, 0.2, 0.3, 0.35, 0.4, 0.45, 0.55, 0.6, 0.65, 0.7, 0.8, 0.9)
ATM_COL = len(FIXED_DELTAS)          # anchor column holding the k = 0 option
DAY_YEARS = 1.0 / 365.0
SLOPE_DK = 1e-3


class _PricerCache:
    """Per-maturity integrators plus a small cache of per-state pricers."""

    def __init__(self, params, var_path, limit=128):
        self.params = params
        vp = np.clip(np.asarray(var_path, dtype=float), 0.0, None)
        self.v_lo = max(float(vp.min()) * 0.5, 1e-8)
        self.v_hi = float(vp.max()) * 1.5 + 1e-6
        self.limit = limit
        self._integrators: dict[float, MaturityIntegrator] = {}
        self._states: dict[tuple, object] = {}

    def integrator(self, tau: float) -> MaturityIntegrator:
        tau_key = round(tau, 12)
        integ = self._integrators.get(tau_key)
        if integ is None:
            integ = MaturityIntegrator(self.params, tau, self.v_lo, self.v_hi)
            self._integrators[tau_key] = integ
        return integ

    def get(self, tau: float, v: float):
        key = (round(tau, 12), round(v, 14))
        pricer = self._states.get(key)
        if pricer is None:
            pricer = self.integrator(tau).state(v)
            if len(self._states) >= self.limit:
                self._states.pop(next(iter(self._states)))
            self._states[key] = pricer
        return pricer


class HestonAnchorMarket:
    """Fixed-delta anchor options and estimator series on one simulated path."""

    def __init__(self, params: HestonParams, n_days: int, seed: int,
                 taus_days=(30, 90, 180, 365), day: float = DAY_YEARS,
                 lam: float = 0.97, atm_tau_days: int = 30):
        self.params = params
        self.day = day
        self.taus_days = tuple(taus_days)
        self.taus = np.asarray(taus_days, dtype=float) * day
        spot, var, diag = simulate_paths(params, n_days, seed, day=day)
        self.spot = spot[0]
        self.var = var[0]
        self.sim_diagnostics = diag
        self._pricers = _PricerCache(params, self.var)
        self._build_anchors()
        self._build_estimators(lam)

    # ------------------------------------------------------------ construction

    def _smile(self, i: int, tau: float, ks, sigma0=None) -> np.ndarray:
        pricer = self._pricers.get(tau, max(self.var[i], 0.0))
        return pricer.smile(self.spot[i], ks, sigma0=sigma0)

    def _build_anchors(self):
        n = len(self.spot)
        nt = len(self.taus)
        na = len(FIXED_DELTAS) + 1
        z = ndtri(np.asarray(FIXED_DELTAS))
        self.anchor_k = np.zeros((n, nt, na))
        self.anchor_vol = np.empty((n, nt, na))
        self.anchor_slope = np.empty((n, nt, na))
        for i in range(n):
            for j, tau in enumerate(self.taus):
                sq_tau = np.sqrt(tau)
                if i == 0:
                    k = delta_to_k(np.asarray(FIXED_DELTAS), tau)
                    sig = None
                    slope = np.zeros(na - 1)
                else:
                    # yesterday's solution is an excellent warm start, and its
                    # smile slope gives a near-exact Newton derivative
                    k = self.anchor_k[i - 1, j, :na - 1].copy()
                    sig = self.anchor_vol[i - 1, j, :na - 1].copy()
                    slope = self.anchor_slope[i - 1, j, :na - 1]
                for _ in range(40):
                    sig = self._smile(i, tau, k, sigma0=sig)
                    resid = k + sig * sq_tau * z - 0.5 * sig * sig * tau
                    if np.max(np.abs(resid)) < 1e-9:
                        break
                    deriv = np.clip(1.0 + slope * (sq_tau * z - sig * tau), 0.25, 4.0)
                    k = k - resid / deriv
                ks = np.concatenate([k, [0.0]])
                self.anchor_k[i, j] = ks
                bumped = np.concatenate([ks - SLOPE_DK, ks, ks + SLOPE_DK])
                guess = np.concatenate([sig, sig[-1:], sig, sig[-1:], sig, sig[-1:]])
                vols = self._smile(i, tau, bumped, sigma0=guess)
                self.anchor_vol[i, j] = vols[na:2 * na]
                self.anchor_slope[i, j] = (vols[2 * na:] - vols[:na]) / (2 * SLOPE_DK)

    def _build_estimators(self, lam: float):
        cfg = EwmaConfig(lam=lam, convention="current", step=self.day)
        r_spot = np.diff(np.log(self.spot))
        self.beta = ewma_vol(r_spot, cfg)                      # aligned to days 1..n
        n, nt, na = self.anchor_vol.shape
        dvol = np.diff(self.anchor_vol, axis=0).reshape(n - 1, nt * na)
        self.zeta = ewma_vol(dvol, cfg).reshape(n - 1, nt, na)
        j_atm = self.taus_days.index(30) if 30 in self.taus_days else 0
        datm = np.diff(self.anchor_vol[:, j_atm, ATM_COL])
        self.rho = ewma_corr(r_spot, datm, lam)

    # -------------------------------------------------------------- resolution

    def _tau_index(self, tau_days: int) -> int:
        try:
            return self.taus_days.index(tau_days)
        except ValueError:
            raise ValueError(f"maturity {tau_days}d is not an anchor pillar") from None

    def _anchor_col(self, delta) -> int:
        if delta is None:
            return ATM_COL
        try:
            return FIXED_DELTAS.index(delta)
        except ValueError:
            raise ValueError(f"delta {delta} is not an anchor") from None

    def atm_delta(self, i: int, tau_days: int) -> float:
        """Delta of the k = 0 option at the prevailing vol."""
        j = self._tau_index(tau_days)
        tau = self.taus[j]
        sig = self.anchor_vol[i, j, ATM_COL]
        return float(bs.norm_cdf(0.5 * sig * np.sqrt(tau)))

    def leg(self, i: int, delta, tau_days: int, quantity: float) -> dict:
        """One anchor option at day i with its formula inputs."""
        j = self._tau_index(tau_days)
        col = self._anchor_col(delta)
        k = float(self.anchor_k[i, j, col])
        return {
            "quantity": quantity, "tau": float(self.taus[j]),
            "strike": float(self.spot[i] * np.exp(k)), "k": k,
            "sigma": float(self.anchor_vol[i, j, col]),
            "slope": float(self.anchor_slope[i, j, col]),
            "zeta_col": (j, col), "tau_index": j,
        }

    def synthetic_leg(self, i: int, strike: float, tau_days: int,
                      quantity: float) -> dict:
        """A non-anchor option (calendar far leg): smile read at its own k."""
        j = self._tau_index(tau_days)
        tau = float(self.taus[j])
        k = float(np.log(strike / self.spot[i]))
        vols = self._smile(i, tau, np.array([k - SLOPE_DK, k, k + SLOPE_DK]))
        return {
            "quantity": quantity, "tau": tau, "strike": strike, "k": k,
            "sigma": float(vols[1]),
            "slope": float((vols[2] - vols[0]) / (2 * SLOPE_DK)),
            "zeta_col": (j, None), "tau_index": j,
        }

    def resolve(self, spec, i: int) -> list[dict]:
        """Positions of a portfolio spec at day i (strikes re-anchored daily)."""
        kind = spec.kind
        if kind == "outright":
            return [self.leg(i, spec.deltas[0], spec.taus_days[0], +1.0)]
        if kind == "calendar":
            t1, t2 = spec.taus_days
            near = self.leg(i, spec.deltas[0], t1, -1.0)
            far = self.synthetic_leg(i, near["strike"], t2, +1.0)
            return [near, far]
        if kind == "butterfly":
            delta = spec.deltas[0]
            tau_d = spec.taus_days[0]
            return [self.leg(i, delta, tau_d, +1.0),
                    self.leg(i, 1.0 - delta, tau_d, +1.0),
                    self.leg(i, None, tau_d, -2.0)]
        raise ValueError(f"unknown portfolio kind {kind!r}")

    def zeta_at(self, i: int, leg: dict) -> float:
        """Vol-of-vol for a leg at day i (estimates use data up to day i only).

        Anchor legs read their own EWMA series; synthetic legs interpolate the
        day's anchor vol-of-vols in k.
        """
        j, col = leg["zeta_col"]
        if col is not None:
            return float(self.zeta[i - 1, j, col])
        ks = self.anchor_k[i, j]
        order = np.argsort(ks)
        return float(np.interp(leg["k"], ks[order], self.zeta[i - 1, j][order]))

    def beta_at(self, i: int) -> float:
        return float(self.beta[i - 1])

    def rho_at(self, i: int) -> float:
        return float(self.rho[i - 1])

    # ----------------------------------------------------------------- pricing

    def price_legs(self, legs, i: int, ds: float = 0.0, dv: float = 0.0) -> float:
        """Portfolio value at day i with optional spot/variance bumps."""
        s = self.spot[i] + ds
        v = max(self.var[i], 0.0) + dv
        total = 0.0
        for j in sorted({lg["tau_index"] for lg in legs}):
            group = [lg for lg in legs if lg["tau_index"] == j]
            pricer = self._pricers.get(float(self.taus[j]), v)
            prices = pricer.prices(s, np.array([lg["strike"] for lg in group]))
            total += float(np.dot([lg["quantity"] for lg in group], prices))
        return total

    def value(self, legs, i: int) -> float:
        """Day-i value through the anchor vols (identical to the model price)."""
        total = 0.0
        for lg in legs:
            total += lg["quantity"] * float(bs.price_kernel(
                lg["k"], lg["tau"], +1, self.spot[i], 1.0, lg["sigma"]))
        return total

    def realized_pnl(self, spec, i: int, h_days: int) -> float:
        """Model P&L of the day-i portfolio held to i + h (tau rolls down).

        The portfolio is re-anchored at fixed (delta, tau) every backtest day;
        the P&L holds that day's contracts over the horizon and reprices them
        with the semi-analytic formula.
        """
        return self.contract_pnl(self.resolve(spec, i), i, h_days)

    def profile_pnl(self, spec, i: int, h_days: int) -> float:
        """Value change of the re-anchored fixed-(delta, tau) profile itself."""
        legs0 = self.resolve(spec, i)
        legs1 = self.resolve(spec, i + h_days)
        return self.value(legs1, i + h_days) - self.value(legs0, i)

    def contract_pnl(self, legs, i: int, h_days: int) -> float:
        """Fixed-contract P&L from day i to i + h (tau rolls down)."""
        ih = i + h_days
        s1 = self.spot[ih]
        v1 = max(self.var[ih], 0.0)
        value0 = self.value(legs, i)
        value1 = 0.0
        for j in sorted({lg["tau_index"] for lg in legs}):
            group = [lg for lg in legs if lg["tau_index"] == j]
            tau1 = float(self.taus[j]) - h_days * self.day
            pricer = self._pricers.get(tau1, v1)
            prices = pricer.prices(s1, np.array([lg["strike"] for lg in group]))
            value1 += float(np.dot([lg["quantity"] for lg in group], prices))
        return value1 - value0

    def fd_sensitivities(self, legs, i: int, rel_eps_s: float = 0.01,
                         rel_eps_v: float = 0.01):
        """Central-difference (dPi/dS, dPi/dv) with Heston repricing."""
        eps_s = rel_eps_s * self.spot[i]
        eps_v = rel_eps_v * max(self.var[i], 1e-6)
        up_s = self.price_legs(legs, i, ds=+eps_s)
        dn_s = self.price_legs(legs, i, ds=-eps_s)
        up_v = self.price_legs(legs, i, dv=+eps_v)
        dn_v = self.price_legs(legs, i, dv=-eps_v)
        return (up_s - dn_s) / (2 * eps_s), (up_v - dn_v) / (2 * eps_v)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _GridPointSeries:
    vols: np.ndarray      # (n_days + 1,) implied vols at a fixed (tau, k)
    zeta: np.ndarray      # (n_days,) EWMA vol-of-vol, aligned to returns


class GridPanelMarket:
    """Daily 17 x 8 implied-vol grids on a simulated Heston path.

    The grid k columns come from the 17 delta points at the symbolic vol, so
    the node layout is identical every day; nodes are the FHS risk factors.
    """

    def __init__(self, params: HestonParams, n_days: int, seed: int,
                 day: float = DAY_YEARS, lam: float = 0.97,
                 tau_days=GRID_TAU_DAYS, deltas=DELTA_POINTS):
        self.params = params
        self.day = day
        self.lam = lam
        spot, var, diag = simulate_paths(params, n_days, seed, day=day)
        self.spot = spot[0]
        self.var = var[0]
        self.sim_diagnostics = diag
        self.taus = np.asarray(tau_days, dtype=float) / DAYS_PER_YEAR
        self.k_columns = np.vstack([np.sort(delta_to_k(np.asarray(deltas), tau))
                                    for tau in self.taus])
        pricers = _PricerCache(params, self.var)
        n = len(self.spot)
        nt, nk = self.k_columns.shape
        self.vols = np.empty((n, nt, nk))
        for j, tau in enumerate(self.taus):
            integ = pricers.integrator(float(tau))
            kernel = integ.moneyness_kernel(self.k_columns[j])
            for i in range(n):
                guess = self.vols[i - 1, j] if i > 0 else None
                self.vols[i, j] = integ.smile_fixed_k(
                    kernel, max(self.var[i], 0.0), self.spot[i],
                    self.k_columns[j], sigma0=guess)
        self._point_cache: dict[tuple, _GridPointSeries] = {}

    def day_grid(self, i: int) -> SurfaceGrid:
        return SurfaceGrid(self.taus, self.k_columns, self.vols[i],
                           TermStructure.flat(float(self.spot[i])))

    def panel_returns(self):
        """(spot log returns, IV absolute returns) over the whole history."""
        r_spot = np.diff(np.log(self.spot))
        n = len(self.spot)
        iv = self.vols.reshape(n, -1)
        return r_spot, np.diff(iv, axis=0)

    def point_series(self, tau: float, k: float) -> _GridPointSeries:
        """Vol history and EWMA vol-of-vol at a fixed (tau, k) point."""
        key = (round(float(tau), 12), round(float(k), 12))
        if key not in self._point_cache:
            n = len(self.spot)
            vols = np.empty(n)
            for i in range(n):
                vols[i] = float(self.day_grid(i).vol(tau, k))
            cfg = EwmaConfig(lam=self.lam, convention="current", step=self.day)
            zeta = ewma_vol(np.diff(vols), cfg)
            self._point_cache[key] = _GridPointSeries(vols, zeta)
        return self._point_cache[key]

    def atm_1m_series(self) -> _GridPointSeries:
        return self.point_series(21.0 / DAYS_PER_YEAR, 0.0)

    def beta_series(self):
        cfg = EwmaConfig(lam=self.lam, convention="current", step=self.day)
        return ewma_vol(np.diff(np.log(self.spot)), cfg)

    def rho_series(self):
        r_spot = np.diff(np.log(self.spot))
        datm = np.diff(self.atm_1m_series().vols)
        return ewma_corr(r_spot, datm, self.lam)

    def resolve(self, spec, i: int) -> Portfolio:
        """Moneyness-anchored portfolios (strikes = m * forward, daily)."""
        s = float(self.spot[i])
        legs = []
        if spec.kind == "calendar":
            t1, t2 = (td / DAYS_PER_YEAR for td in spec.taus_days)
            m = spec.moneyness[0] if spec.moneyness else 1.0
            legs = [Position(-1.0, +1, m * s, t1), Position(+1.0, +1, m * s, t2)]
        elif spec.kind == "butterfly":
            tau = spec.taus_days[0] / DAYS_PER_YEAR
            m_lo, m_mid, m_hi = spec.moneyness
            legs = [Position(+1.0, +1, m_lo * s, tau),
                    Position(-2.0, +1, m_mid * s, tau),
                    Position(+1.0, +1, m_hi * s, tau)]
        else:
            raise ValueError(f"grid market supports calendar/butterfly specs, "
                             f"not {spec.kind!r}")
        return Portfolio(tuple(legs))

    def portfolio_value(self, portfolio: Portfolio, i: int) -> float:
        grid = self.day_grid(i)
        s = float(self.spot[i])
        total = portfolio.cash + portfolio.spot_quantity * s
        for pos in portfolio:
            k = np.log(pos.strike / s)
            sig = float(grid.vol(pos.tau, k))
            total += pos.quantity * float(bs.price_kernel(k, pos.tau, pos.omega,
                                                          s, 1.0, sig))
        return total

    def realized_pnl(self, spec, i: int, h_days: int) -> float:
        """Grid-priced P&L of the day-i contracts held to i + h (tau rolls)."""
        portfolio = self.resolve(spec, i)
        ih = i + h_days
        grid1 = self.day_grid(ih)
        s1 = float(self.spot[ih])
        value1 = portfolio.cash + portfolio.spot_quantity * s1
        for pos in portfolio:
            tau1 = pos.tau - h_days * self.day
            k1 = np.log(pos.strike / s1)
            sig = float(grid1.vol(tau1, k1))
            value1 += pos.quantity * float(bs.price_kernel(k1, tau1, pos.omega,
                                                           s1, 1.0, sig))
        return value1 - self.portfolio_value(portfolio, i)

    def volofvol_factor_at(self, tau: float, k: float, i: int,
                           quantile: float = 0.9, multiplier: float = 1.1) -> float:
        """Scale factor from the ratio history up to day i (expanding window)."""
        point = self.point_series(tau, k)
        atm = self.atm_1m_series()
        ratios = point.zeta[:i] / atm.zeta[:i]
        return multiplier * float(empirical_quantile(ratios, quantile))

    def zeta_factory(self, i: int, mode: str = "factor"):
        """zeta(k, tau) for day i.

        "factor": scale factor (ratio-history quantile) times the current 1M
        ATM vol-of-vol, the configuration of the market-data experiments;
        "node": each point's own EWMA vol-of-vol.
        """
        if mode == "factor":
            atm_now = float(self.atm_1m_series().zeta[i - 1])

            def zeta(k, tau):
                return self.volofvol_factor_at(tau, k, i) * atm_now
        elif mode == "node":
            def zeta(k, tau):
                return float(self.point_series(tau, k).zeta[i - 1])
        else:
            raise ValueError("zeta mode must be 'factor' or 'node'")
        return zeta
