"""Rolling backtests of the VaR methods against model P&Ls.

Portfolios are re-anchored every day at fixed delta (or moneyness) and fixed
time-to-maturity; the realized P&L reprices the day's contracts at the horizon
with the same pricing criterion the VaR inputs use.  A breach is a realized
P&L below the VaR; its size is the margin shortfall over the absolute
portfolio price.  Aggregates over portfolios (mean/median coverage and
size-of-loss), procyclicality measures and the CCP margin stack live here.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import bs
from .estimators import EwmaConfig
from .fhs import RiskFactorPanel, fhs_var
from .labdata import GridPanelMarket, HestonAnchorMarket
from .shortterm import (ShortTermParams, ZQuantileTable, exposure_coeffs,
                        gaussian_var)

OUTRIGHT_DELTAS = (0.2, 0.35, None, 0.65, 0.8)       # None marks the ATM anchor
BUTTERFLY_DELTAS = (0.1, 0.2, 0.3, 0.35, 0.4, 0.45)
MATURITIES_DAYS = (30, 90, 180, 365)


@dataclass(frozen=True)
class PortfolioSpec:
    kind: str                      # outright | calendar | butterfly
    deltas: tuple = ()
    taus_days: tuple = ()
    moneyness: tuple | None = None

    @property
    def label(self) -> str:
        ds = ",".join("atm" if d is None else f"{d:g}" for d in self.deltas)
        ts = ",".join(str(t) for t in self.taus_days)
        ms = "" if self.moneyness is None else \
            ";m=" + ",".join(f"{m:g}" for m in self.moneyness)
        return f"{self.kind}[{ds};{ts}{ms}]"


def make_portfolios() -> list[PortfolioSpec]:
    """The 74 test portfolios: 20 outrights, 30 calendars, 24 butterflies.

    Outrights take deltas {0.2, 0.35, ATM, 0.65, 0.8} per maturity; calendar
    spreads short the near call and long the far call at the near-maturity
    strike; butterflies go long the delta and 1-delta calls and short two ATM
    calls, with the extra wing deltas {0.1, 0.3, 0.4, 0.45}.
    """
    specs = [PortfolioSpec("outright", (d,), (t,))
             for d in OUTRIGHT_DELTAS for t in MATURITIES_DAYS]
    specs += [PortfolioSpec("calendar", (d,), pair)
              for pair in itertools.combinations(MATURITIES_DAYS, 2)
              for d in OUTRIGHT_DELTAS]
    specs += [PortfolioSpec("butterfly", (d,), (t,))
              for d in BUTTERFLY_DELTAS for t in MATURITIES_DAYS]
    assert len(specs) == 74
    return specs


@dataclass
class BacktestReport:
    spec_label: str
    days: np.ndarray
    var: np.ndarray
    pnl: np.ndarray
    price: np.ndarray
    breach: np.ndarray = field(init=False)
    breach_size: np.ndarray = field(init=False)

    def __post_init__(self):
        self.breach = self.pnl < self.var
        with np.errstate(divide="ignore", invalid="ignore"):
            size = np.where(self.breach & (np.abs(self.price) > 0),
                            (self.var - self.pnl) / np.abs(self.price), np.nan)
        self.breach_size = size

    @property
    def coverage(self) -> float:
        return 1.0 - float(np.mean(self.breach)) if self.breach.size else float("nan")

    @property
    def mean_size_of_loss(self) -> float:
        sizes = self.breach_size[np.isfinite(self.breach_size)]
        return float(np.mean(sizes)) if sizes.size else float("nan")


def summarize(reports) -> dict:
    """Mean/median coverage and size-of-loss across portfolios.

    Coverage averages over every portfolio; the size-of-loss statistic is the
    per-portfolio mean breach size averaged over the portfolios that breached
    at least once on a non-zero-price day.
    """
    cov = np.array([r.coverage for r in reports])
    sizes = np.array([r.mean_size_of_loss for r in reports])
    sizes = sizes[np.isfinite(sizes)]
    return {
        "coverage_mean": float(np.mean(cov)),
        "coverage_median": float(np.median(cov)),
        "size_mean": float(np.mean(sizes)) if sizes.size else float("nan"),
        "size_median": float(np.median(sizes)) if sizes.size else float("nan"),
    }


# ----------------------------------------------------------- method adapters


def _anchor_var_shortterm(market: HestonAnchorMarket, legs, i, theta, h_years,
                          z_table: ZQuantileTable | None):
    beta = market.beta_at(i)
    rho = market.rho_at(i)
    s = market.spot[i]
    sum_delta = 0.0
    sum_vega_slope = 0.0
    q = 0.0
    for lg in legs:
        ctx = bs.QuoteContext(lg["k"], lg["tau"], +1, s, 1.0, lg["sigma"])
        delta, vega = bs.greeks(ctx)
        sum_delta += lg["quantity"] * delta
        sum_vega_slope += lg["quantity"] * vega * lg["slope"]
        q += lg["quantity"] * market.zeta_at(i, lg) * vega
    c = beta * (s * sum_delta - sum_vega_slope)
    scale = math.sqrt(max(c * c + q * q + 2.0 * rho * c * q, 0.0))
    if z_table is None:
        return float(bs.norm_ppf(1.0 - theta)) * scale * math.sqrt(h_years)
    return z_table.quantile(c, q, rho) * scale * math.sqrt(h_years)


def run_anchor_backtest(market: HestonAnchorMarket, specs, method: str,
                        theta: float = 0.99, h_days: int = 1,
                        test_days: int | None = None, nu: float = 5.0,
                        seed: int = 0) -> list[BacktestReport]:
    """Backtest on the anchored Heston market.

    method: "sv" (finite-difference first-order stochastic-vol formula),
    "shortterm" (Gaussian closed formula) or "shortterm-t" (t-Student spot).
    Tests the last test_days days (default: every day with history behind it
    and horizon ahead).
    """
    n_last = len(market.spot) - 1
    h_years = h_days * market.day
    start = 1 if test_days is None else n_last - test_days + 1
    if start < 1:
        raise ValueError("not enough history for the requested test window")
    days = np.arange(start, n_last - h_days + 1)
    z_table = None
    if method == "shortterm-t":
        z_table = ZQuantileTable(nu, theta, seed=seed)

    reports = []
    for spec in specs:
        var = np.empty(len(days))
        pnl = np.empty(len(days))
        price = np.empty(len(days))
        for m, i in enumerate(days):
            legs = market.resolve(spec, i)
            if method == "sv":
                sens = market.fd_sensitivities(legs, i)
                v = max(market.var[i], 0.0)
                rad = (market.spot[i] ** 2 * v * sens[0] ** 2
                       + market.params.xi ** 2 * v * sens[1] ** 2
                       + 2 * market.params.rho * market.params.xi * market.spot[i]
                       * v * sens[0] * sens[1])
                var[m] = float(bs.norm_ppf(1.0 - theta)) * math.sqrt(max(rad, 0.0)) \
                    * math.sqrt(h_years)
            elif method in ("shortterm", "shortterm-t"):
                var[m] = _anchor_var_shortterm(market, legs, i, theta, h_years,
                                               z_table)
            else:
                raise ValueError(f"unknown anchor-market method {method!r}")
            pnl[m] = market.realized_pnl(spec, i, h_days)
            price[m] = market.value(legs, i)
        reports.append(BacktestReport(spec.label, days.copy(), var, pnl, price))
    return reports


def run_grid_backtest(market: GridPanelMarket, specs, method: str,
                      theta: float = 0.99, h_days: int = 1,
                      test_days: int = 365, n_back: int = 1250,
                      lam: float = 0.97, zeta_mode: str = "factor") -> list[BacktestReport]:
    """Backtest on the 17 x 8 grid market: "fhs" or "shortterm".

    The short-term route uses EWMA spot vol, EWMA spot/ATM-IV correlation and
    the vol-of-vol route selected by zeta_mode ("factor": ratio-quantile scale
    times the 1M ATM vol-of-vol; "node": per-point EWMA); FHS devolatilizes
    the spot and every grid node.
    """
    n_last = len(market.spot) - 1
    start = n_last - test_days + 1
    days = np.arange(start, n_last - h_days + 1)
    beta = market.beta_series()
    rho = market.rho_series()
    r_spot, iv_abs = market.panel_returns()
    cfg_panel = None

    reports = []
    for spec in specs:
        var = np.empty(len(days))
        pnl = np.empty(len(days))
        price = np.empty(len(days))
        for m, i in enumerate(days):
            portfolio = market.resolve(spec, i)
            if method == "fhs":
                if cfg_panel is None:
                    cfg_panel = EwmaConfig(lam=lam, floor=1e-6, convention="lagged",
                                           step=market.day)
                panel = RiskFactorPanel(r_spot[:i], iv_abs[:i], cfg_panel)
                grid = market.day_grid(i)
                var[m], _, _ = fhs_var(portfolio, float(market.spot[i]), grid,
                                       panel, theta, h_days,
                                       n_back=min(n_back, i))
            elif method == "shortterm":
                grid = market.day_grid(i)
                params = ShortTermParams(beta=float(beta[i - 1]),
                                         rho=float(rho[i - 1]), theta=theta,
                                         h=h_days * market.day,
                                         zeta_of=market.zeta_factory(i, zeta_mode))
                coeffs = exposure_coeffs(portfolio, float(market.spot[i]), grid,
                                         params)
                var[m] = gaussian_var(coeffs, params)
            else:
                raise ValueError(f"unknown grid-market method {method!r}")
            pnl[m] = market.realized_pnl(spec, i, h_days)
            price[m] = market.portfolio_value(portfolio, i)
        reports.append(BacktestReport(spec.label, days.copy(), var, pnl, price))
    return reports


def run_stub_backtest(var_fn, pnl_series, price: float = 1.0,
                      label: str = "stub") -> BacktestReport:
    """Backtest a var-producing callable against a given P&L series (tests)."""
    n = len(pnl_series)
    days = np.arange(n)
    var = np.array([var_fn(i) for i in range(n)], dtype=float)
    return BacktestReport(label, days, var, np.asarray(pnl_series, float),
                          np.full(n, price))


# ------------------------------------------------------------ procyclicality


class UndefinedPeakTroughError(ValueError):
    """min(-VaR) is zero; the peak-to-trough ratio is undefined."""


def procyclicality_metrics(var_series, n_list=(1, 5, 10, 20)) -> dict:
    """Peak-to-trough and n-day procyclicality measures of a margin series.

    peak_to_trough = max(-VaR) / min(-VaR);
    n-day % = max_t(-VaR_t / -VaR_{t-n} - 1) * 100.
    """
    margins = -np.asarray(var_series, dtype=float)
    if margins.size <= max(n_list):
        raise ValueError("series too short for the requested n-day measures")
    if np.min(margins) <= 0.0:
        raise UndefinedPeakTroughError("margin series touches zero")
    out = {"peak_to_trough": float(np.max(margins) / np.min(margins))}
    for n in n_list:
        ratio = margins[n:] / margins[:-n]
        out[f"{n}_day_pct"] = float((np.max(ratio) - 1.0) * 100.0)
    return out


# ---------------------------------------------------------------- margin stack


def net_option_value(quantities, prices) -> float:
    """NOV: sum of long option values minus sum of short option values."""
    q = np.asarray(quantities, dtype=float)
    p = np.asarray(prices, dtype=float)
    return float(np.dot(q, p))


def unpaid_premium(quantities, prices, pending) -> float:
    """UP: net value of positions whose premium has not settled yet."""
    q = np.asarray(quantities, dtype=float)
    p = np.asarray(prices, dtype=float)
    mask = np.asarray(pending, dtype=bool)
    return float(np.dot(q[mask], p[mask]))


def total_risk_requirement(im: float, addons: float, som: float, nov: float,
                           up: float) -> float:
    """max(max(IM + add-ons, SOM) - NOV + UP, 0); the zero floor keeps the
    CCP from paying out."""
    if im < 0 or som < 0:
        raise ValueError("im and som are positive-margin amounts")
    return max(max(im + addons, som) - nov + up, 0.0)


# -------------------------------------------------------------------- reports

REPORT_HEADER = ["spec_id", "date", "var", "pnl", "breach", "breach_size"]
SUMMARY_HEADER = ["spec_id", "coverage", "mean_size_of_loss", "peak_to_trough",
                  "1_day_pct", "5_day_pct", "10_day_pct", "20_day_pct"]


def write_report_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in reports:
            for m in range(len(r.days)):
                size = r.breach_size[m]
                w.writerow([r.spec_label, int(r.days[m]), repr(float(r.var[m])),
                            repr(float(r.pnl[m])), int(r.breach[m]),
                            "" if not np.isfinite(size) else repr(float(size))])


def write_summary_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_HEADER)
        for r in reports:
            try:
                pm = procyclicality_metrics(r.var)
                pro = [repr(pm["peak_to_trough"]), repr(pm["1_day_pct"]),
                       repr(pm["5_day_pct"]), repr(pm["10_day_pct"]),
                       repr(pm["20_day_pct"])]
            except (ValueError, UndefinedPeakTroughError):
                pro = [""] * 5
            w.writerow([r.spec_label, repr(r.coverage),
                        "" if not np.isfinite(r.mean_size_of_loss)
                        else repr(r.mean_size_of_loss), *pro])


def read_report_csv(path):
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_HEADER:
            raise ValueError(f"report CSV header must be {','.join(REPORT_HEADER)}")
        rows.extend(reader)
    return rows
