"""CLI wiring: determinism, exit codes, artifact formats."""
import csv
import datetime as dt
import subprocess
import sys

import numpy as np
import pytest

from optmargin import bs, marketdata as md
from optmargin.cli import main


def run_cli(args):
    return main(list(args))


def test_simulate_heston_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert run_cli(["simulate-heston", "--days", "30", "--seed", "7",
                        "--outdir", str(out)]) == 0
    assert (out1 / "heston_history.csv").read_bytes() == \
        (out2 / "heston_history.csv").read_bytes()


def test_simulate_manifest_echoes_config(tmp_path):
    assert run_cli(["simulate-heston", "--days", "10", "--seed", "3",
                    "--outdir", str(tmp_path)]) == 0
    manifest = (tmp_path / "heston_history.manifest").read_text()
    assert "seed=3" in manifest and "days=10" in manifest


def test_unknown_flag_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["simulate-heston", "--not-a-flag", "1"])
    assert exc.value.code == 2


def test_unknown_method_config_error(tmp_path):
    portfolio = tmp_path / "p.csv"
    portfolio.write_text("quantity,omega,strike,tau_days\n1.0,1,100.0,91\n")
    code = run_cli(["var", "--method", "shortterm", "--portfolio", str(portfolio),
                    "--outdir", str(tmp_path)])
    assert code == 2   # missing --grid


def test_var_shortterm_matches_library(tmp_path):
    # golden fixture produced by the library API
    from optmargin.marketdata import SurfaceGrid, TermStructure, write_grid_csv
    from optmargin.portfolio import Portfolio, Position
    from optmargin.shortterm import (ShortTermParams, exposure_coeffs,
                                     gaussian_var)
    spot, vol = 100.0, 0.2
    taus = np.array([0.25, 2.0])
    kcol = np.linspace(-1.0, 1.0, 9)
    grid = SurfaceGrid(taus, np.vstack([kcol, kcol]), np.full((2, 9), vol),
                       TermStructure.flat(spot))
    grid_path = tmp_path / "grid.csv"
    write_grid_csv(grid_path, grid)
    pf_path = tmp_path / "pf.csv"
    pf_path.write_text("quantity,omega,strike,tau_days\n1.0,1,100.0,365\n")
    code = run_cli(["var", "--method", "shortterm", "--portfolio", str(pf_path),
                    "--grid", str(grid_path), "--spot", "100", "--beta", "0.2",
                    "--zeta", "0.5", "--corr", "0.0", "--mpor", "365",
                    "--outdir", str(tmp_path)])
    assert code == 0
    got = float((tmp_path / "var.txt").read_text())
    params = ShortTermParams(beta=0.2, rho=0.0, theta=0.99, h=1.0,
                             zeta_of=lambda k, tau: 0.5)
    pf = Portfolio((Position(1.0, 1, 100.0, 1.0),))
    want = gaussian_var(exposure_coeffs(pf, spot, grid, params), params)
    assert got == pytest.approx(want, rel=1e-12)


def test_var_affine_round_trip(tmp_path):
    import sys as _sys
    _sys.path.insert(0, "tests")
    from _cases import random_instance
    from optmargin.affine import closed_var, save_model
    rng = np.random.default_rng(30)
    model, pf = random_instance(rng, d=1, n_pos=1)
    model_path = tmp_path / "model.txt"
    save_model(model, model_path)
    pos = pf.positions[0]
    pf_path = tmp_path / "pf.csv"
    pf_path.write_text("quantity,omega,strike,tau_days\n"
                       f"{float(pos.quantity)!r},{pos.omega},{float(pos.strike)!r},"
                       f"{float(pos.tau * 365.0)!r}\n")
    code = run_cli(["var", "--method", "affine-closed", "--portfolio", str(pf_path),
                    "--model", str(model_path), "--outdir", str(tmp_path)])
    assert code == 0
    got = float((tmp_path / "var.txt").read_text())
    assert got == pytest.approx(closed_var(model, pf, 0.99, 1 / 365.0), rel=1e-10)


def test_build_grid_pipeline(tmp_path):
    as_of = dt.date(2019, 6, 3)
    rows = []
    for days in (21, 63, 126):
        tau = days / md.DAYS_PER_YEAR
        for strike in np.linspace(80, 125, 10):
            strike = float(strike)
            k = np.log(strike / 100.0)
            call = float(bs.bs_price(bs.QuoteContext(k, tau, 1, 100.0, 1.0, 0.25)))
            put = float(bs.bs_price(bs.QuoteContext(k, tau, -1, 100.0, 1.0, 0.25)))
            expiry = (as_of + dt.timedelta(days=days)).isoformat()
            rows.append(f"{as_of},{expiry},1,{strike!r},{call!r},5\n")
            rows.append(f"{as_of},{expiry},-1,{strike!r},{put!r},5\n")
    chain = tmp_path / "chain.csv"
    chain.write_text("as_of,expiry,omega,strike,mid,volume\n" + "".join(rows))
    code = run_cli(["build-grid", "--chain", str(chain), "--outdir", str(tmp_path)])
    assert code == 0
    grid = md.read_grid_csv(tmp_path / "grid.csv", md.TermStructure.flat(100.0))
    assert np.allclose(grid.vols, 0.25, atol=1e-4)


def test_backtest_smoke_and_report(tmp_path):
    code = run_cli(["backtest", "--method", "sv", "--days", "25", "--seed", "1",
                    "--test-days", "6", "--n-specs", "2",
                    "--outdir", str(tmp_path)])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert rows and set(r["spec_id"] for r in rows)
    assert run_cli(["report", "--input", str(tmp_path / "report.csv")]) == 0


def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("days=12\nseed=9\n")
    assert run_cli(["--config", str(cfg), "simulate-heston",
                    "--outdir", str(tmp_path)]) == 0
    manifest = (tmp_path / "heston_history.manifest").read_text()
    assert "days=12" in manifest and "seed=9" in manifest


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "optmargin.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "simulate-heston" in out.stdout
