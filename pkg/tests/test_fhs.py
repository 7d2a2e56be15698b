"""Filtered historical simulation: devol/revol mechanics and full revaluation."""
import numpy as np
import pytest

from optmargin import heston, labdata
from optmargin.estimators import EwmaConfig, empirical_quantile
from optmargin.fhs import RiskFactorPanel, filtered_scenarios, fhs_var
from optmargin.marketdata import SurfaceGrid, TermStructure
from optmargin.portfolio import Portfolio, Position

DAY = 1.0 / 365.0


def flat_grid(spot=100.0, vol=0.2, nk=9):
    taus = np.array([0.1, 1.0])
    kcol = np.linspace(-0.5, 0.5, nk)
    vols = np.full((2, nk), vol)
    return SurfaceGrid(taus, np.vstack([kcol, kcol]), vols,
                       TermStructure.flat(spot))


def make_panel(spot_returns, iv_returns=None, nk=9, lam=0.97):
    n = len(spot_returns)
    if iv_returns is None:
        iv_returns = np.zeros((n, 2 * nk))
    cfg = EwmaConfig(lam=lam, floor=1e-8, convention="lagged", step=DAY)
    return RiskFactorPanel(np.asarray(spot_returns, float), iv_returns, cfg)


def test_constant_returns_reproduce_themselves():
    r = 0.01
    panel = make_panel(np.full(100, r))
    scen = filtered_scenarios(panel, 50)
    assert scen.shape == (50, 1 + 18)
    assert np.allclose(scen[:, 0], r, rtol=1e-10)


def test_revolatilization_is_linear():
    rng = np.random.default_rng(0)
    r = rng.normal(0, 0.01, 300)
    panel_lo = make_panel(r)
    panel_hi = make_panel(np.concatenate([r, [0.05]]))  # a shock lifts EWMA
    s_lo = filtered_scenarios(panel_lo, 100)
    s_hi = filtered_scenarios(panel_hi, 100)
    cfg = panel_lo.ewma_cfg
    from optmargin.estimators import ewma_vol
    cur = EwmaConfig(cfg.lam, cfg.floor, "current", cfg.step)
    ratio = (ewma_vol(np.concatenate([r, [0.05]]), cur)[-1]
             / ewma_vol(r, cur)[-1])
    assert np.allclose(s_hi[:-1, 0] / s_lo[1:, 0], ratio, rtol=1e-9)


def test_scenario_count_capped_by_history():
    panel = make_panel(np.full(30, 0.01))
    with pytest.raises(ValueError):
        filtered_scenarios(panel, 31)
    assert filtered_scenarios(panel, 30).shape[0] == 30


def test_pure_spot_reduces_to_rescaled_return_quantile():
    rng = np.random.default_rng(1)
    r = rng.normal(0, 0.01, 500)
    panel = make_panel(r)
    spot = 100.0
    pf = Portfolio((), spot_quantity=2.0)
    var, pnl, _ = fhs_var(pf, spot, flat_grid(spot), panel, 0.99)
    scen = filtered_scenarios(panel, 500)
    direct = empirical_quantile(2.0 * spot * (np.exp(scen[:, 0]) - 1.0), 0.01)
    assert var == pytest.approx(float(direct), abs=1e-10)


def test_empty_portfolio_and_cash():
    panel = make_panel(np.random.default_rng(2).normal(0, 0.01, 100))
    var, pnl, _ = fhs_var(Portfolio(()), 100.0, flat_grid(), panel, 0.99)
    assert var == 0.0 and np.all(pnl == 0.0)
    var, _, _ = fhs_var(Portfolio((), cash=50.0), 100.0, flat_grid(), panel, 0.99)
    assert var == 0.0


def test_determinism():
    rng = np.random.default_rng(3)
    r = rng.normal(0, 0.01, 300)
    iv = rng.normal(0, 0.002, (300, 18))
    panel = make_panel(r, iv)
    pf = Portfolio((Position(1.0, 1, 100.0, 0.5),))
    a = fhs_var(pf, 100.0, flat_grid(), panel, 0.99)
    b = fhs_var(pf, 100.0, flat_grid(), panel, 0.99)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_iv_floor_counted():
    rng = np.random.default_rng(4)
    r = rng.normal(0, 0.01, 200)
    iv = np.zeros((200, 18))
    iv[::2] = -0.3   # shocks big enough to push vols through the floor
    iv[1::2] = 0.3
    panel = make_panel(r, iv)
    pf = Portfolio((Position(1.0, 1, 100.0, 0.5),))
    _, _, diag = fhs_var(pf, 100.0, flat_grid(vol=0.2), panel, 0.99)
    assert diag["floored_nodes"] > 0


def test_multi_day_scales_revol_vol():
    rng = np.random.default_rng(5)
    panel = make_panel(rng.normal(0, 0.01, 400))
    s1 = filtered_scenarios(panel, 100)
    pf = Portfolio((), spot_quantity=1.0)
    v1, _, _ = fhs_var(pf, 100.0, flat_grid(), panel, 0.99, h_days=1)
    v4, _, _ = fhs_var(pf, 100.0, flat_grid(), panel, 0.99, h_days=4)
    # log returns scale by 2 exactly; the P&L is exp of them, so only roughly
    assert abs(v4) > 1.8 * abs(v1)


def test_heston_panel_scenario_std_tracks_ewma():
    market = labdata.GridPanelMarket(heston.SP500_PARAMS, 500, seed=6)
    r_spot, iv_abs = market.panel_returns()
    cfg = EwmaConfig(lam=0.97, floor=1e-8, convention="lagged", step=DAY)
    panel = RiskFactorPanel(r_spot, iv_abs, cfg)
    scen = filtered_scenarios(panel, 450)
    from optmargin.estimators import ewma_vol
    cur = ewma_vol(r_spot, EwmaConfig(lam=0.97, convention="current", step=DAY))
    target = cur[-1] * np.sqrt(DAY)   # per-step forecast vol
    assert np.std(scen[:, 0]) == pytest.approx(float(target), rel=0.10)
