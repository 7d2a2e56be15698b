"""Filtered Historical Simulation VaR with full Black-Scholes revaluation.

Risk factors are the spot (log returns) and the implied-vol grid nodes
(absolute returns).  Each factor is devolatilized by its own EWMA history and
revolatilized to the current EWMA forecast; the shocked surface reprices the
portfolio without any arbitrage repair, which is the baseline's documented
weakness.  Multi-day MPORs scale the one-day revol vol by sqrt(h) instead of
using overlapping returns.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import bs
from .estimators import EwmaConfig, empirical_quantile, ewma_vol
from .marketdata import SurfaceGrid
from .portfolio import Portfolio

IV_FLOOR = 1e-4


@dataclass(frozen=True)
class RiskFactorPanel:
    """Aligned history of spot log returns and absolute IV-grid returns.

    iv_abs_returns has one column per grid node, laid out slice by slice in
    the (tau, k) order of the grid that produced it.
    """

    spot_log_returns: np.ndarray      # (n,)
    iv_abs_returns: np.ndarray        # (n, n_nodes)
    ewma_cfg: EwmaConfig = field(default_factory=EwmaConfig)

    def __post_init__(self):
        if self.spot_log_returns.shape[0] != self.iv_abs_returns.shape[0]:
            raise ValueError("spot and IV return histories must be aligned")


def filtered_scenarios(panel: RiskFactorPanel, n_back: int):
    """(n_back, 1 + n_nodes) scenario returns for the next day.

    Historical returns are devolatilized with the configured EWMA convention
    and rescaled by the current EWMA forecast; the most recent n_back rows are
    used, newest last.  Scenario counts cannot exceed the available history.
    """
    n = panel.spot_log_returns.shape[0]
    if n_back > n:
        raise ValueError(f"requested {n_back} scenarios but history has {n}")
    cfg = panel.ewma_cfg
    floored = EwmaConfig(cfg.lam, max(cfg.floor, 1e-12), cfg.convention, cfg.step)
    current = EwmaConfig(cfg.lam, max(cfg.floor, 1e-12), "current", cfg.step)
    returns = np.column_stack([panel.spot_log_returns, panel.iv_abs_returns])
    devol = ewma_vol(returns, floored) * np.sqrt(cfg.step)   # per-step vols
    if np.any(devol <= 0.0):
        raise ValueError("zero devolatilization volatility; raise the floor")
    revol = ewma_vol(returns, current)[-1] * np.sqrt(cfg.step)
    eta = returns / devol
    return eta[n - n_back:] * revol


def fhs_var(portfolio: Portfolio, spot: float, grid: SurfaceGrid,
            panel: RiskFactorPanel, theta: float, h_days: int = 1,
            n_back: int | None = None):
    """FHS VaR: empirical (1-theta)-quantile of scenario P&Ls with full revaluation.

    Per scenario the spot is shocked multiplicatively and the grid vols
    additively (floored at 1e-4 with a diagnostic count); options are repriced
    at tau - h with Black-Scholes under constant rates.  Returns
    (var, scenario_pnls, diagnostics).
    """
    if n_back is None:
        n_back = panel.spot_log_returns.shape[0]
    shocks = filtered_scenarios(panel, n_back) * np.sqrt(float(h_days))
    n_scen = shocks.shape[0]
    h_years = h_days * panel.ewma_cfg.step
    term = grid.term

    spot_s = spot * np.exp(shocks[:, 0])
    iv_shocks = shocks[:, 1:]
    nt, nk = grid.vols.shape
    if iv_shocks.shape[1] != nt * nk:
        raise ValueError("panel nodes do not match the grid layout")
    shocked = grid.vols.ravel()[None, :] + iv_shocks
    floored_count = int(np.count_nonzero(shocked < IV_FLOOR))
    shocked = np.maximum(shocked, IV_FLOOR).reshape(n_scen, nt, nk)

    pnl = np.zeros(n_scen)
    pnl += portfolio.spot_quantity * (spot_s - spot)
    for pos in portfolio:
        tau0 = pos.tau
        fwd0 = spot * float(term.fwd_ratio(tau0))
        df0 = float(term.discount(tau0))
        k0 = np.log(pos.strike / fwd0)
        price0 = bs.price_kernel(k0, tau0, pos.omega, fwd0, df0,
                                 float(grid.vol(tau0, k0)))
        tau1 = tau0 - h_years
        if tau1 <= 0:
            raise ValueError("position expires inside the MPOR")
        fwd1 = spot_s * float(term.fwd_ratio(tau1))
        df1 = float(term.discount(tau1))
        k1 = np.log(pos.strike / fwd1)
        sig1 = _shocked_vol(grid, shocked, tau1, k1)
        price1 = bs.price_kernel(k1, tau1, pos.omega, fwd1, df1, sig1)
        pnl += pos.quantity * (price1 - float(price0))

    order = np.argsort(pnl, kind="stable")
    var = float(empirical_quantile(pnl[order], 1.0 - theta))
    diag = {"floored_nodes": floored_count, "n_scenarios": n_scen}
    return var, pnl, diag


def _shocked_vol(grid: SurfaceGrid, shocked_vols, tau, k):
    """Grid interpolation (linear in k, linear total variance in tau) on the
    shocked node values; k may vary per scenario."""
    taus = grid.taus
    k = np.asarray(k, dtype=float)

    def slice_vol(j):
        kc = grid.k_columns[j]
        vals = shocked_vols[:, j, :]
        # per-scenario interpolation with common breakpoints
        idx = np.clip(np.searchsorted(kc, k) - 1, 0, len(kc) - 2)
        lam = np.clip((k - kc[idx]) / (kc[idx + 1] - kc[idx]), 0.0, 1.0)
        rows = np.arange(vals.shape[0])
        return (1.0 - lam) * vals[rows, idx] + lam * vals[rows, idx + 1]

    if tau <= taus[0]:
        return slice_vol(0)
    if tau >= taus[-1]:
        return slice_vol(len(taus) - 1)
    j = int(np.searchsorted(taus, tau, side="right")) - 1
    wa = slice_vol(j) ** 2 * taus[j]
    wb = slice_vol(j + 1) ** 2 * taus[j + 1]
    lam = (tau - taus[j]) / (taus[j + 1] - taus[j])
    return np.sqrt(((1.0 - lam) * wa + lam * wb) / tau)


# ---------------------------------------------------------------- CSV format

PANEL_HEADER = ["date", "factor_id", "return"]


def write_panel_csv(path, panel: RiskFactorPanel, grid: SurfaceGrid, dates=None):
    """Long-format panel: factor ids are "spot" and "iv:{tau_days}:{col}"."""
    n, m = panel.iv_abs_returns.shape
    if dates is None:
        dates = [str(i) for i in range(n)]
    tau_days = [int(round(t * 252)) for t in grid.taus]
    nk = grid.vols.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PANEL_HEADER)
        for i in range(n):
            w.writerow([dates[i], "spot", repr(float(panel.spot_log_returns[i]))])
            for col in range(m):
                fid = f"iv:{tau_days[col // nk]}:{col % nk}"
                w.writerow([dates[i], fid, repr(float(panel.iv_abs_returns[i, col]))])


def write_floor_diagnostics_csv(path, diagnostics: dict):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        for key in sorted(diagnostics):
            w.writerow([key, diagnostics[key]])
