"""Portfolio generation, backtest reports, procyclicality and the margin stack."""
import numpy as np
import pytest

from optmargin import backtest as bt
from optmargin import bs
from optmargin.shortterm import ExposureCoeffs, ShortTermParams, gaussian_var


class TestMakePortfolios:
    def test_count_is_74(self):
        specs = bt.make_portfolios()
        assert len(specs) == 74
        kinds = {}
        for s in specs:
            kinds[s.kind] = kinds.get(s.kind, 0) + 1
        assert kinds == {"outright": 20, "calendar": 30, "butterfly": 24}

    def test_calendar_maturity_pairs(self):
        for s in bt.make_portfolios():
            if s.kind == "calendar":
                t1, t2 = s.taus_days
                assert t1 < t2

    def test_butterfly_deltas_extended(self):
        deltas = {s.deltas[0] for s in bt.make_portfolios() if s.kind == "butterfly"}
        assert deltas == {0.1, 0.2, 0.3, 0.35, 0.4, 0.45}

    def test_labels_unique(self):
        labels = [s.label for s in bt.make_portfolios()]
        assert len(set(labels)) == 74


class TestReports:
    def test_cap_method_full_coverage(self):
        rng = np.random.default_rng(0)
        pnl = rng.normal(0, 1, 400)
        report = bt.run_stub_backtest(lambda i: -np.inf, pnl)
        assert report.coverage == 1.0
        assert not report.breach.any()

    def test_zero_var_on_symmetric_noise(self):
        rng = np.random.default_rng(1)
        pnl = rng.normal(0, 1, 4000)
        report = bt.run_stub_backtest(lambda i: 0.0, pnl)
        assert report.coverage == pytest.approx(0.5, abs=0.03)

    def test_breach_size_definition(self):
        pnl = np.array([-2.0, 1.0, -0.5])
        report = bt.run_stub_backtest(lambda i: -1.0, pnl, price=10.0)
        assert list(report.breach) == [True, False, False]
        assert report.breach_size[0] == pytest.approx((-1.0 - (-2.0)) / 10.0)

    def test_aggregates_recomputable_from_rows(self, tmp_path):
        rng = np.random.default_rng(2)
        reports = [bt.run_stub_backtest(lambda i: -1.5, rng.normal(0, 1, 100),
                                        price=5.0, label=f"s{j}") for j in range(3)]
        path = tmp_path / "report.csv"
        bt.write_report_csv(path, reports)
        rows = bt.read_report_csv(path)
        for rep in reports:
            sel = [r for r in rows if r["spec_id"] == rep.spec_label]
            assert len(sel) == len(rep.days)
            breaches = sum(r["breach"] == "1" for r in sel)
            assert 1.0 - breaches / len(sel) == pytest.approx(rep.coverage)
            sizes = [float(r["breach_size"]) for r in sel if r["breach_size"]]
            if sizes:
                assert np.mean(sizes) == pytest.approx(rep.mean_size_of_loss)

    def test_summary_pools_breach_events(self):
        pnl1 = np.array([-2.0, 0.0, 0.0, 0.0])   # one breach, size 1/10
        pnl2 = np.array([0.0, 0.0, 0.0, -3.0])   # one breach, size 2/10
        r1 = bt.run_stub_backtest(lambda i: -1.0, pnl1, price=10.0, label="a")
        r2 = bt.run_stub_backtest(lambda i: -1.0, pnl2, price=10.0, label="b")
        summ = bt.summarize([r1, r2])
        assert summ["size_mean"] == pytest.approx(0.15)
        assert summ["coverage_mean"] == pytest.approx(0.75)


def test_kupiec_band_on_own_model():
    """Exact-model coverage falls in the binomial 99% acceptance band."""
    rng = np.random.default_rng(3)
    from scipy.stats import binom
    n = 5000
    c, q, rho = 3.0, 2.0, -0.4
    h = 1 / 365.0
    params = ShortTermParams(beta=0.2, rho=rho, theta=0.99, h=h,
                             zeta_of=lambda k, tau: 0.5)
    var = gaussian_var(ExposureCoeffs(c, q), params)
    cov = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    z = rng.standard_normal((n, 2)) @ cov.T
    pnl = (c * z[:, 0] + q * z[:, 1]) * np.sqrt(h)
    breaches = int(np.sum(pnl < var))
    lo, hi = binom.ppf(0.005, n, 0.01), binom.ppf(0.995, n, 0.01)
    assert lo <= breaches <= hi


class TestProcyclicality:
    def test_constant_series(self):
        out = bt.procyclicality_metrics(np.full(40, -2.0))
        assert out["peak_to_trough"] == 1.0
        assert all(out[f"{n}_day_pct"] == 0.0 for n in (1, 5, 10, 20))

    def test_one_day_doubling(self):
        var = -np.concatenate([np.ones(30), [2.0], np.ones(10)])
        out = bt.procyclicality_metrics(var)
        assert out["1_day_pct"] == pytest.approx(100.0)

    def test_zero_margin_undefined(self):
        var = np.concatenate([np.zeros(1), -np.ones(30)])
        with pytest.raises(bt.UndefinedPeakTroughError):
            bt.procyclicality_metrics(var)

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            bt.procyclicality_metrics(-np.ones(15))


class TestMarginStack:
    def test_forced_arithmetic(self):
        assert bt.total_risk_requirement(10.0, 0.0, 2.0, 3.0, 0.0) == 7.0

    def test_som_floor_binds(self):
        assert bt.total_risk_requirement(1.0, 0.0, 5.0, 0.0, 0.0) == 5.0

    def test_zero_floor(self):
        assert bt.total_risk_requirement(1.0, 0.0, 0.0, 10.0, 0.0) == 0.0

    def test_monotonicity(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            im, addons, som, up = rng.uniform(0, 5, 4)
            nov = rng.uniform(-5, 5)
            base = bt.total_risk_requirement(im, addons, som, nov, up)
            eps = 0.1
            assert bt.total_risk_requirement(im + eps, addons, som, nov, up) >= base
            assert bt.total_risk_requirement(im, addons + eps, som, nov, up) >= base
            assert bt.total_risk_requirement(im, addons, som + eps, nov, up) >= base
            assert bt.total_risk_requirement(im, addons, som, nov, up + eps) >= base
            assert bt.total_risk_requirement(im, addons, som, nov + eps, up) <= base

    def test_nov_and_up_helpers(self):
        quantities = [2.0, -1.0, 3.0]
        prices = [1.5, 4.0, 0.5]
        assert bt.net_option_value(quantities, prices) == pytest.approx(0.5)
        assert bt.unpaid_premium(quantities, prices, [True, False, True]) == \
            pytest.approx(4.5)
