"""Chain sanitation, surface grid construction and arbitrage repair."""
import datetime as dt

import numpy as np
import pytest

from optmargin import bs, heston, marketdata as md

AS_OF = dt.date(2019, 6, 3)


def quote(expiry_days, omega, strike, mid, volume=10.0):
    return md.OptionQuote(AS_OF, AS_OF + dt.timedelta(days=expiry_days),
                          omega, strike, mid, volume)


def synth_pairs(expiry_days, df, fwd, strikes, sigma=0.2, noise=0.0, rng=None):
    """Call/put pairs priced with Black-Scholes at one flat vol."""
    tau = expiry_days / md.DAYS_PER_YEAR
    out = []
    for strike in strikes:
        k = np.log(strike / fwd)
        call = bs.bs_price(bs.QuoteContext(k, tau, 1, fwd, df, sigma))
        put = bs.bs_price(bs.QuoteContext(k, tau, -1, fwd, df, sigma))
        eps = rng.uniform(-noise, noise, size=2) if noise else (0.0, 0.0)
        out.append(quote(expiry_days, 1, strike, call + eps[0]))
        out.append(quote(expiry_days, -1, strike, put + eps[1]))
    return out


class TestForwardExtraction:
    def test_exact_recovery(self):
        chain = synth_pairs(63, 0.99, 105.0, [90.0, 100.0, 110.0])
        df, fwd = md.extract_forward_discount(chain, chain[0].expiry)
        assert df == pytest.approx(0.99, abs=1e-12)
        assert fwd == pytest.approx(105.0, rel=1e-12)

    def test_noisy_recovery(self):
        rng = np.random.default_rng(4)
        chain = synth_pairs(63, 0.99, 105.0, list(np.linspace(85, 125, 9)),
                            noise=0.01, rng=rng)
        df, fwd = md.extract_forward_discount(chain, chain[0].expiry)
        assert abs(df - 0.99) < 0.005
        assert abs(fwd - 105.0) < 0.5

    def test_single_pair_insufficient(self):
        chain = synth_pairs(63, 0.99, 105.0, [100.0])
        with pytest.raises(md.InsufficientDataError):
            md.extract_forward_discount(chain, chain[0].expiry)

    def test_degenerate_strikes(self):
        chain = synth_pairs(63, 0.99, 105.0, [100.0]) * 2
        with pytest.raises((md.InsufficientDataError, md.RankError)):
            md.extract_forward_discount(chain, chain[0].expiry)


class TestSanitize:
    def setup_method(self):
        self.term = md.TermStructure.flat(100.0)

    def test_upper_bound_drop(self):
        bad = quote(21, 1, 100.0, 101.0)
        kept, dropped = md.sanitize_chain([bad], self.term)
        assert not kept
        assert dropped[0][1] == "upper bound"

    def test_zero_volume_drop(self):
        q = quote(21, 1, 100.0, 2.0, volume=0.0)
        kept, dropped = md.sanitize_chain([q], self.term)
        assert dropped[0][1] == "zero volume"

    def test_put_conversion_by_parity(self):
        strike = 90.0
        put_mid = max(strike - 100.0, 0.0) + 1.0
        q = quote(21, -1, strike, put_mid)
        kept, dropped = md.sanitize_chain([q], self.term)
        assert not dropped
        assert kept[0].omega == 1
        assert kept[0].mid == pytest.approx(put_mid + (100.0 - strike))

    def test_sorted_output(self):
        qs = [quote(42, 1, 110.0, 1.0), quote(21, 1, 95.0, 6.0),
              quote(21, 1, 90.0, 10.5)]
        kept, _ = md.sanitize_chain(qs, self.term)
        assert [(q.expiry, q.strike) for q in kept] == sorted(
            (q.expiry, q.strike) for q in kept)


class TestSurfaceGrid:
    def test_flat_vol_preserved(self):
        term = md.TermStructure.flat(100.0)
        chain = []
        for days in (21, 63, 126, 252):
            chain += synth_pairs(days, 1.0, 100.0, list(np.linspace(70, 140, 11)),
                                 sigma=0.2)
        calls, _ = md.sanitize_chain(chain, term)
        grid = md.build_surface_grid(calls, term)
        assert np.allclose(grid.vols, 0.2, atol=1e-7)

    def test_total_variance_interpolation_arithmetic(self):
        # w(0.1) = 0.004 and w(0.5) = 0.02 interpolate to w(0.3) = 0.012,
        # i.e. sigma = sqrt(0.012 / 0.3) = 0.2
        term = md.TermStructure.flat(100.0)
        taus = np.array([0.1, 0.5])
        kcol = np.linspace(-0.2, 0.2, 5)
        vols = np.vstack([np.full(5, np.sqrt(0.004 / 0.1)),
                          np.full(5, np.sqrt(0.02 / 0.5))])
        grid = md.SurfaceGrid(taus, np.vstack([kcol, kcol]), vols, term)
        assert float(grid.vol(0.3, 0.0)) == pytest.approx(0.2, rel=1e-12)

    def test_round_trip_node_vols(self):
        term = md.TermStructure.flat(100.0)
        rng = np.random.default_rng(9)
        taus = np.asarray(md.GRID_TAU_DAYS, float) / md.DAYS_PER_YEAR
        chain = []
        for days in md.GRID_TAU_DAYS:
            tau = days / md.DAYS_PER_YEAR
            sig = 0.2 + 0.02 * np.log(days / 21.0)
            chain += synth_pairs(days, 1.0, 100.0,
                                 list(100.0 * np.exp(np.linspace(-0.4, 0.4, 15))),
                                 sigma=float(np.clip(sig, 0.1, 0.4)))
        calls, _ = md.sanitize_chain(chain, term)
        grid = md.build_surface_grid(calls, term)
        # nodes interpolate their own values exactly
        for j, tau in enumerate(grid.taus):
            got = np.array([grid.vol(tau, k) for k in grid.k_columns[j]])
            assert np.allclose(got, grid.vols[j], rtol=1e-12)

    def test_heston_chain_prices_held_out_strike(self):
        params = heston.SP500_PARAMS
        term = md.TermStructure.flat(params.s0)
        chain = []
        for days in md.GRID_TAU_DAYS:
            tau = days / md.DAYS_PER_YEAR
            strikes = params.s0 * np.exp(np.linspace(-0.25, 0.25, 13) *
                                         max(np.sqrt(tau), 0.15))
            prices = heston.call_price(params, strikes, tau)
            for strike, price in zip(strikes, prices):
                lo = max(params.s0 - strike, 0.0)
                if not lo + 1e-8 * params.s0 < price < params.s0:
                    continue
                chain.append(quote(days, 1, float(strike), float(price)))
        grid = md.build_surface_grid(chain, term)
        tau = 63 / md.DAYS_PER_YEAR
        held_out = params.s0 * np.exp(0.03)
        k = np.log(held_out / params.s0)
        grid_price = float(grid.price(tau, k)) * params.s0
        direct = float(heston.call_price(params, held_out, tau))
        assert abs(grid_price - direct) <= 0.005 * params.s0


class TestSmileSlope:
    def make_grid(self, slope_fn):
        term = md.TermStructure.flat(100.0)
        taus = np.array([0.1, 0.3])
        kcol = np.linspace(-0.3, 0.3, 13)
        vols = np.vstack([slope_fn(kcol), slope_fn(kcol)])
        return md.SurfaceGrid(taus, np.vstack([kcol, kcol]), vols, term)

    def test_flat_smile(self):
        grid = self.make_grid(lambda k: np.full_like(k, 0.2))
        assert md.smile_slope(grid, 0.1, 0.05) == pytest.approx(0.0, abs=1e-15)

    def test_linear_smile_exact(self):
        grid = self.make_grid(lambda k: 0.2 + 0.5 * k)
        for k in (-0.1, 0.0, 0.12):
            assert md.smile_slope(grid, 0.1, k) == pytest.approx(0.5, abs=1e-12)

    def test_quadratic_smile_second_order(self):
        kcol = np.linspace(-0.3, 0.3, 121)
        term = md.TermStructure.flat(100.0)
        vols = 0.2 + 0.3 * kcol ** 2
        grid = md.SurfaceGrid(np.array([0.1, 0.3]), np.vstack([kcol, kcol]),
                              np.vstack([vols, vols]), term)
        dk = kcol[1] - kcol[0]
        assert md.smile_slope(grid, 0.1, 0.1) == pytest.approx(0.06, abs=0.3 * dk ** 2 * 10)

    def test_outside_hull_warns_zero(self):
        grid = self.make_grid(lambda k: 0.2 + 0.5 * k)
        with pytest.warns(md.ExtrapolationWarning):
            slope = md.smile_slope(grid, 0.1, 0.9)
        assert slope == 0.0


class TestArbitrageRepair:
    def clean_grid(self):
        term = md.TermStructure.flat(100.0)
        taus = np.asarray(md.GRID_TAU_DAYS, float) / md.DAYS_PER_YEAR
        k_cols = np.vstack([np.sort(md.delta_to_k(np.asarray(md.DELTA_POINTS), t))
                            for t in taus])
        vols = np.full_like(k_cols, 0.2)
        return md.SurfaceGrid(taus, k_cols, vols, term)

    def test_clean_grid_identity(self):
        grid = self.clean_grid()
        violations, repaired = md.static_arbitrage_report(grid)
        assert violations == []
        assert repaired is grid

    def test_upper_bound_clamped(self):
        grid = self.clean_grid()
        vols = grid.vols.copy()
        vols[2, 3] = 40.0   # price effectively at the discounted forward
        bad = grid.with_vols(vols)
        violations, repaired = md.static_arbitrage_report(bad)
        kinds = {v.kind for v in violations}
        assert "upper_bound" in kinds or "k_monotonicity" in kinds
        again, _ = md.static_arbitrage_report(repaired)
        assert again == []

    def test_convexity_kink_detected_and_repaired(self):
        grid = self.clean_grid()
        prices = grid.node_prices()
        j = 5
        bumped = prices[j].copy()
        bumped[8] += 0.03   # concavity kink at one interior node
        kcol = grid.k_columns[j]
        count = 0
        for i in range(1, len(kcol) - 1):   # brute-force convexity over triples
            h0 = kcol[i] - kcol[i - 1]
            h1 = kcol[i + 1] - kcol[i]
            d2 = (bumped[i + 1] - bumped[i]) / h1 - (bumped[i] - bumped[i - 1]) / h0
            count += d2 < -md.ARB_TOL
        assert count >= 1
        vols = grid.vols.copy()
        vols[j] = bs.implied_vol_vec(np.clip(bumped, None, 1 - 1e-9), kcol,
                                     grid.taus[j], +1, 1.0, 1.0)
        bad = grid.with_vols(vols)
        violations, repaired = md.static_arbitrage_report(bad)
        assert any(v.kind == "k_convexity" for v in violations)
        again, _ = md.static_arbitrage_report(repaired)
        assert again == []

    def test_tau_monotonicity_repair(self):
        grid = self.clean_grid()
        vols = grid.vols.copy()
        vols[4] = 0.12    # depressed slice under a 0.2 neighbour below it
        bad = grid.with_vols(vols)
        violations, repaired = md.static_arbitrage_report(bad)
        assert any(v.kind == "tau_monotonicity" for v in violations)
        again, _ = md.static_arbitrage_report(repaired)
        assert again == []


def test_chain_csv_round_trip(tmp_path):
    chain = synth_pairs(63, 0.99, 105.0, [90.0, 100.0, 110.0])
    path = tmp_path / "chain.csv"
    md.write_chain_csv(path, chain)
    back = md.read_chain_csv(path)
    assert back == chain


def test_grid_csv_round_trip(tmp_path):
    term = md.TermStructure.flat(100.0)
    taus = np.array([21.0, 63.0]) / md.DAYS_PER_YEAR
    kcol = np.linspace(-0.2, 0.2, 5)
    vols = np.vstack([0.2 + 0.1 * kcol, 0.22 + 0.05 * kcol])
    grid = md.SurfaceGrid(taus, np.vstack([kcol, kcol]), vols, term)
    path = tmp_path / "grid.csv"
    md.write_grid_csv(path, grid)
    back = md.read_grid_csv(path, term)
    assert np.array_equal(back.taus, grid.taus)
    assert np.array_equal(back.vols, grid.vols)
