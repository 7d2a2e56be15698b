"""Batch command-line entry point.

Subcommands wire the data generators, calibration and VaR methods into
reproducible runs: every invocation writes its artifacts plus a manifest
echoing the fully resolved configuration and seed, and identical
configurations produce byte-identical artifacts regardless of parallelism.

Exit codes: 0 success, 2 configuration error, 3 numerical error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import backtest as bt
from . import heston, labdata, marketdata, shortterm
from .affine import (build_model_from_history, closed_var, empirical_var,
                     load_model, quasi_explicit_var, save_model)
from .portfolio import Portfolio, Position

PORTFOLIO_HEADER = ["quantity", "omega", "strike", "tau_days"]
HISTORY_HEADER = ["date", "spot", "variance"]


class ConfigError(ValueError):
    pass


def _outdir(args):
    path = args.outdir or os.environ.get("OPTMARGIN_OUTDIR", ".")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(path, args, extra=None):
    """Plain key=value manifest of the resolved run configuration."""
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        items.update(extra)
    with open(path, "w") as f:
        for key in sorted(items):
            f.write(f"{key}={items[key]}\n")


def _load_config_defaults(parser, argv):
    """key=value config file applied as parser defaults (flags override)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        cfg_path = argv[idx + 1]
    except IndexError:
        raise ConfigError("--config needs a file path") from None
    defaults = {}
    with open(cfg_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = value.strip()

    def apply(p):
        typed = {}
        for action in p._actions:
            if action.dest in defaults:
                raw = defaults[action.dest]
                typed[action.dest] = action.type(raw) if action.type else raw
        if typed:
            p.set_defaults(**typed)

    apply(parser)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                apply(sp)
    return argv[:idx] + argv[idx + 2:]


def read_portfolio_csv(path) -> Portfolio:
    positions = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PORTFOLIO_HEADER:
            raise ConfigError(f"portfolio CSV header must be {','.join(PORTFOLIO_HEADER)}")
        for row in reader:
            positions.append(Position(float(row["quantity"]), int(row["omega"]),
                                      float(row["strike"]),
                                      float(row["tau_days"]) / 365.0))
    return Portfolio(tuple(positions))


def _write_history_csv(path, spot, variance):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_HEADER)
        for i in range(len(spot)):
            w.writerow([i, repr(float(spot[i])), repr(float(variance[i]))])


def _read_history_csv(path):
    spot, var = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != HISTORY_HEADER:
            raise ConfigError(f"history CSV header must be {','.join(HISTORY_HEADER)}")
        for row in reader:
            spot.append(float(row["spot"]))
            var.append(float(row["variance"]))
    return np.asarray(spot), np.asarray(var)


# ------------------------------------------------------------------ commands


def cmd_simulate_heston(args):
    params = heston.HestonParams(kappa=args.kappa, theta=args.theta, xi=args.xi,
                                 rho=args.rho, alpha=args.alpha, s0=args.s0,
                                 v0=args.v0, dt=args.dt_days / 365.0)
    S, V, diag = heston.simulate_paths(params, args.days, args.seed)
    out = _outdir(args)
    hist_path = os.path.join(out, "heston_history.csv")
    _write_history_csv(hist_path, S[0], V[0])
    _write_manifest(os.path.join(out, "heston_history.manifest"), args,
                    {"truncated_fraction": repr(diag["truncated_fraction"])})
    print(f"wrote {hist_path} ({args.days} days, seed {args.seed})")
    return 0


def cmd_build_grid(args):
    chain = marketdata.read_chain_csv(args.chain)
    expiries = sorted({q.expiry for q in chain})
    as_of = chain[0].as_of
    pillars = []
    for expiry in expiries:
        try:
            df, fwd = marketdata.extract_forward_discount(chain, expiry)
        except (marketdata.InsufficientDataError, marketdata.RankError) as exc:
            print(f"skipping {expiry}: {exc}", file=sys.stderr)
            continue
        tau = (expiry - as_of).days / marketdata.DAYS_PER_YEAR
        pillars.append((tau, df, fwd))
    if not pillars:
        raise ConfigError("no expiry with a usable forward/discount extraction")
    pillars.sort()
    taus, dfs, fwds = (np.array(x) for x in zip(*pillars))
    spot = args.spot if args.spot else float(fwds[0])
    term = marketdata.TermStructure(taus, dfs, fwds, spot)
    calls, dropped = marketdata.sanitize_chain(chain, term)
    grid = marketdata.build_surface_grid(calls, term)
    out = _outdir(args)
    grid_path = os.path.join(out, "grid.csv")
    marketdata.write_grid_csv(grid_path, grid)
    _write_manifest(os.path.join(out, "grid.manifest"), args,
                    {"quotes_in": len(chain), "quotes_dropped": len(dropped)})
    print(f"wrote {grid_path} ({len(calls)} quotes kept, {len(dropped)} dropped)")
    return 0


def cmd_var(args):
    portfolio = read_portfolio_csv(args.portfolio)
    out = _outdir(args)
    if args.method in ("affine-closed", "affine-quasi", "affine-mc"):
        if not args.model:
            raise ConfigError("affine methods need --model")
        model = load_model(args.model)
        if args.method == "affine-closed":
            value = closed_var(model, portfolio, args.theta, args.mpor / 365.0,
                               variant="tstudent" if args.nu else "gaussian",
                               nu=args.nu, seed=args.seed)
        elif args.method == "affine-quasi":
            value = quasi_explicit_var(model, portfolio, args.theta,
                                       args.mpor / 365.0)
        else:
            value = empirical_var(model, portfolio, args.theta, args.mpor / 365.0,
                                  args.n_sims, args.seed, n_workers=args.workers)
    elif args.method in ("shortterm", "shortterm-t"):
        if not args.grid:
            raise ConfigError("short-term methods need --grid")
        if not args.spot:
            raise ConfigError("short-term methods need --spot")
        term = marketdata.TermStructure.flat(args.spot)
        grid = marketdata.read_grid_csv(args.grid, term)
        params = shortterm.ShortTermParams(
            beta=args.beta, rho=args.corr, theta=args.theta,
            h=args.mpor / 365.0, zeta_of=lambda k, tau: args.zeta,
            nu=args.nu)
        coeffs = shortterm.exposure_coeffs(portfolio, args.spot, grid, params)
        if args.method == "shortterm":
            value = shortterm.gaussian_var(coeffs, params)
        else:
            if args.nu is None:
                raise ConfigError("shortterm-t needs --nu")
            value = shortterm.tstudent_var(coeffs, params, seed=args.seed,
                                           n_workers=args.workers)
    elif args.method == "fhs":
        raise ConfigError("fhs VaR runs through the backtest command on a panel")
    elif args.method == "sv":
        if not args.history:
            raise ConfigError("sv needs --history (simulated spot/variance)")
        spot, var = _read_history_csv(args.history)
        params = heston.HestonParams(kappa=args.kappa, theta=args.theta_var,
                                     xi=args.xi, rho=args.rho, s0=spot[-1],
                                     v0=max(var[-1], 1e-10))
        def pricer(pf, s, v):
            return heston.portfolio_price(params, pf, s, v)
        sens = heston.fd_portfolio_sensitivities(
            pricer, portfolio, spot[-1], max(var[-1], 1e-10),
            0.01 * spot[-1], 0.01 * max(var[-1], 1e-6))
        value = heston.sv_var(sens, spot[-1], max(var[-1], 1e-10), params,
                              args.theta, args.mpor / 365.0)
    else:
        raise ConfigError(f"unknown method {args.method!r}")
    var_path = os.path.join(out, "var.txt")
    with open(var_path, "w") as f:
        f.write(repr(float(value)) + "\n")
    _write_manifest(os.path.join(out, "var.manifest"), args)
    print(f"VaR[{args.method}] = {value!r}")
    return 0


def cmd_backtest(args):
    out = _outdir(args)
    if args.method in ("sv", "shortterm", "shortterm-t"):
        market = labdata.HestonAnchorMarket(
            heston.SP500_PARAMS, args.days, args.seed, lam=args.lam)
        specs = bt.make_portfolios()[:args.n_specs] if args.n_specs else \
            bt.make_portfolios()
        reports = bt.run_anchor_backtest(market, specs, args.method,
                                         theta=args.theta, h_days=args.mpor,
                                         test_days=args.test_days, nu=args.nu or 5.0,
                                         seed=args.seed)
    elif args.method in ("fhs", "grid-shortterm"):
        market = labdata.GridPanelMarket(heston.SP500_PARAMS, args.days,
                                         args.seed, lam=args.lam)
        specs = [bt.PortfolioSpec("calendar", (), (21, 126), (1.0,)),
                 bt.PortfolioSpec("butterfly", (), (63,), (0.9, 1.0, 1.1))]
        method = "fhs" if args.method == "fhs" else "shortterm"
        reports = bt.run_grid_backtest(market, specs, method, theta=args.theta,
                                       h_days=args.mpor,
                                       test_days=args.test_days or 365,
                                       zeta_mode=args.zeta_mode)
    else:
        raise ConfigError(f"unknown backtest method {args.method!r}")
    report_path = os.path.join(out, "report.csv")
    summary_path = os.path.join(out, "summary.csv")
    bt.write_report_csv(report_path, reports)
    bt.write_summary_csv(summary_path, reports)
    summ = bt.summarize(reports)
    _write_manifest(os.path.join(out, "backtest.manifest"), args,
                    {k: repr(v) for k, v in summ.items()})
    print(f"wrote {report_path} and {summary_path}")
    print(" ".join(f"{k}={v:.6f}" for k, v in summ.items()))
    return 0


def cmd_report(args):
    rows = bt.read_report_csv(args.input)
    by_spec = {}
    for row in rows:
        by_spec.setdefault(row["spec_id"], []).append(row)
    print("spec_id,days,coverage,mean_size_of_loss")
    for spec_id in sorted(by_spec):
        group = by_spec[spec_id]
        breaches = [r for r in group if r["breach"] == "1"]
        sizes = [float(r["breach_size"]) for r in breaches if r["breach_size"]]
        coverage = 1.0 - len(breaches) / len(group)
        mean_size = sum(sizes) / len(sizes) if sizes else float("nan")
        print(f"{spec_id},{len(group)},{coverage:.6f},{mean_size:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optmargin",
        description="Initial-margin VaR engines for option portfolios")
    parser.add_argument("--config", help="key=value defaults file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-heston", help="simulate a daily (S, v) history")
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kappa", type=float, default=heston.SP500_PARAMS.kappa)
    p.add_argument("--theta", type=float, default=heston.SP500_PARAMS.theta)
    p.add_argument("--xi", type=float, default=heston.SP500_PARAMS.xi)
    p.add_argument("--rho", type=float, default=heston.SP500_PARAMS.rho)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--s0", type=float, default=heston.SP500_PARAMS.s0)
    p.add_argument("--v0", type=float, default=heston.SP500_PARAMS.v0)
    p.add_argument("--dt-days", type=float, default=0.1, dest="dt_days")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_simulate_heston)

    p = sub.add_parser("build-grid", help="option chain CSV -> implied-vol grid CSV")
    p.add_argument("--chain", required=True)
    p.add_argument("--spot", type=float, default=None)
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_build_grid)

    p = sub.add_parser("calibrate-affine",
                       help="calibrate the affine factor model from a surface panel")
    p.add_argument("--grids", required=True,
                   help="long CSV date,tau_days,k,sigma of daily grids")
    p.add_argument("--spots", required=True, help="CSV date,spot")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_calibrate_affine_panel)

    p = sub.add_parser("var", help="one VaR figure for a portfolio file")
    p.add_argument("--method", required=True,
                   choices=["shortterm", "shortterm-t", "fhs", "sv",
                            "affine-closed", "affine-quasi", "affine-mc"])
    p.add_argument("--portfolio", required=True)
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--mpor", type=float, default=1.0, help="MPOR in days")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model", default=None, help="affine model file")
    p.add_argument("--grid", default=None, help="grid CSV for short-term methods")
    p.add_argument("--spot", type=float, default=None)
    p.add_argument("--beta", type=float, default=None, help="spot vol per sqrt(year)")
    p.add_argument("--zeta", type=float, default=None, help="flat vol-of-vol")
    p.add_argument("--corr", type=float, default=None, help="spot/IV correlation")
    p.add_argument("--nu", type=float, default=None, help="t degrees of freedom")
    p.add_argument("--n-sims", type=int, default=10000, dest="n_sims")
    p.add_argument("--history", default=None, help="spot/variance history CSV (sv)")
    p.add_argument("--kappa", type=float, default=heston.SP500_PARAMS.kappa)
    p.add_argument("--theta-var", type=float, default=heston.SP500_PARAMS.theta,
                   dest="theta_var")
    p.add_argument("--xi", type=float, default=heston.SP500_PARAMS.xi)
    p.add_argument("--rho", type=float, default=heston.SP500_PARAMS.rho)
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_var)

    p = sub.add_parser("backtest", help="rolling VaR backtest on synthetic data")
    p.add_argument("--method", required=True,
                   choices=["sv", "shortterm", "shortterm-t", "fhs",
                            "grid-shortterm"])
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--mpor", type=int, default=1)
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--test-days", type=int, default=None, dest="test_days")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=0.97)
    p.add_argument("--nu", type=float, default=None)
    p.add_argument("--n-specs", type=int, default=None, dest="n_specs")
    p.add_argument("--zeta-mode", default="factor", choices=["factor", "node"],
                   dest="zeta_mode")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("report", help="recompute aggregates from a report CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def cmd_calibrate_affine_panel(args):
    """Calibrate from a long-format grid history plus a spot history."""
    rows = []
    with open(args.grids, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["date", "tau_days", "k", "sigma"]:
            raise ConfigError("grids CSV header must be date,tau_days,k,sigma")
        for row in reader:
            rows.append((row["date"], float(row["tau_days"]), float(row["k"]),
                         float(row["sigma"])))
    dates = sorted({r[0] for r in rows})
    taus_days = sorted({r[1] for r in rows})
    ks_by_tau = {td: sorted({r[2] for r in rows if r[1] == td}) for td in taus_days}
    nk = len(ks_by_tau[taus_days[0]])
    if any(len(v) != nk for v in ks_by_tau.values()):
        raise ConfigError("grid slices must share the column count")
    taus = np.asarray(taus_days) / marketdata.DAYS_PER_YEAR
    k_columns = np.asarray([ks_by_tau[td] for td in taus_days])
    value = {(r[0], r[1], r[2]): r[3] for r in rows}
    prices = np.empty((len(dates), len(taus), nk))
    from . import bs as bs_mod
    for i, date in enumerate(dates):
        for j, td in enumerate(taus_days):
            for m, k in enumerate(ks_by_tau[td]):
                sig = value[(date, td, k)]
                prices[i, j, m] = bs_mod.price_kernel(k, taus[j], +1, 1.0, 1.0, sig)
    spots = {}
    with open(args.spots, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["date", "spot"]:
            raise ConfigError("spots CSV header must be date,spot")
        for row in reader:
            spots[row["date"]] = float(row["spot"])
    spot_series = np.array([spots[d] for d in dates])
    term = marketdata.TermStructure.flat(float(spot_series[-1]))
    model = build_model_from_history(prices, taus, k_columns, spot_series,
                                     1.0 / 365.0, args.d, term,
                                     corr_mode="sample", interp="regression")
    out = _outdir(args)
    model_path = os.path.join(out, "affine_model.txt")
    save_model(model, model_path)
    _write_manifest(os.path.join(out, "affine_model.manifest"), args,
                    {"n_days": len(dates), "d": args.d})
    print(f"wrote {model_path}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (heston.IntegrationError, ArithmeticError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
