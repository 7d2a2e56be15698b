"""Option-chain ingestion and the fixed (tau, k) implied-volatility grid.

Pipeline: extract forwards/discounts from put-call pairs, sanitize quotes
against the static bounds, convert puts to synthetic calls, then build the
fixed surface grid (8 time-to-maturity pillars, 17 delta-spaced moneyness
columns per pillar).  Interpolation is linear in k on implied vols and linear
in total variance in tau with a w = 0 anchor at tau = 0.  Grid prices are
repaired against static arbitrage by convex-cone projection.

Day count is ACT/252 on calendar-day differences (no holiday calendar).
"""
from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from . import bs

DAYS_PER_YEAR = 252.0
GRID_TAU_DAYS = (2, 5, 10, 21, 42, 63, 126, 252)
DELTA_POINTS = tuple(np.linspace(0.015, 0.985, 17))
SYMBOLIC_VOL = 0.1
ARB_TOL = 1e-8


class InsufficientDataError(ValueError):
    """Too few quotes to extract or interpolate."""


class RankError(ValueError):
    """Degenerate regression (e.g. all strikes equal)."""


class EmptySurfaceError(ValueError):
    """No usable expiry slice."""


class ExtrapolationWarning(UserWarning):
    pass


def delta_to_k(delta, tau, vol: float = SYMBOLIC_VOL):
    """Log-forward moneyness of the given call delta at a symbolic volatility.

    Inverts delta = Phi(d1): k = -Phi^{-1}(delta) vol sqrt(tau) + vol^2 tau / 2.
    """
    return -ndtri(delta) * vol * np.sqrt(tau) + 0.5 * vol * vol * tau


@dataclass(frozen=True)
class OptionQuote:
    as_of: dt.date
    expiry: dt.date
    omega: int
    strike: float
    mid: float
    volume: float

    def __post_init__(self):
        if self.strike <= 0 or self.mid < 0 or self.expiry <= self.as_of:
            raise ValueError("invalid quote: need strike > 0, mid >= 0, expiry > as_of")

    @property
    def tau(self) -> float:
        return (self.expiry - self.as_of).days / DAYS_PER_YEAR


@dataclass(frozen=True)
class TermStructure:
    """Discount factors and forwards on tau pillars, log-linearly interpolated."""

    taus: np.ndarray
    discounts: np.ndarray
    forwards: np.ndarray
    spot: float

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        if taus.size == 0 or np.any(np.diff(taus) <= 0):
            raise ValueError("pillars must be non-empty, sorted and unique")
        if np.any(np.asarray(self.forwards) <= 0) or self.spot <= 0:
            raise ValueError("forwards and spot must be positive")
        d = np.asarray(self.discounts, dtype=float)
        if np.any(d <= 0) or np.any(d > 1.0):
            raise ValueError("discounts must lie in (0, 1]")

    @classmethod
    def flat(cls, spot: float, taus=(1e-4, 10.0)) -> "TermStructure":
        taus = np.asarray(taus, dtype=float)
        return cls(taus, np.ones_like(taus), np.full_like(taus, spot), spot)

    def discount(self, tau):
        return np.exp(np.interp(tau, self.taus, np.log(self.discounts)))

    def forward(self, tau):
        return np.exp(np.interp(tau, self.taus, np.log(self.forwards)))

    def fwd_ratio(self, tau):
        return self.forward(tau) / self.spot


def extract_forward_discount(chain, expiry) -> tuple[float, float]:
    """Least squares of C - P = DF*F - DF*K over strikes shared by a call/put pair."""
    calls = {q.strike: q.mid for q in chain if q.expiry == expiry and q.omega == +1}
    puts = {q.strike: q.mid for q in chain if q.expiry == expiry and q.omega == -1}
    strikes = sorted(set(calls) & set(puts))
    if len(strikes) < 2:
        raise InsufficientDataError(f"need >= 2 call/put pairs at {expiry}, got {len(strikes)}")
    K = np.array(strikes)
    y = np.array([calls[s] - puts[s] for s in strikes])
    if np.ptp(K) == 0.0:
        raise RankError("all shared strikes equal; regression is degenerate")
    X = np.column_stack([np.ones_like(K), -K])
    (a, b), *_ = np.linalg.lstsq(X, y, rcond=None)
    discount = float(b)
    forward = float(a / b) if b != 0 else np.inf
    if not (0.0 < discount < 1.2) or not np.isfinite(forward) or forward <= 0:
        raise RankError(f"implausible extraction DF={discount:.4g} F={forward:.4g}")
    return discount, forward


def sanitize_chain(chain, term: TermStructure):
    """Drop zero-volume and bound-violating quotes; convert puts to calls by parity.

    Returns (calls, dropped) where dropped is a list of (quote, reason).
    Surviving quotes are call-equivalent and sorted by (expiry, strike).
    """
    kept, dropped = [], []
    for q in chain:
        if q.volume == 0:
            dropped.append((q, "zero volume"))
            continue
        df = float(term.discount(q.tau))
        fwd = float(term.forward(q.tau))
        if q.omega == +1:
            lo, hi = df * max(fwd - q.strike, 0.0), df * fwd
        else:
            lo, hi = df * max(q.strike - fwd, 0.0), df * q.strike
        if q.mid < lo:
            dropped.append((q, "lower bound"))
            continue
        if q.mid > hi:
            dropped.append((q, "upper bound"))
            continue
        if q.omega == -1:
            q = replace(q, omega=+1, mid=q.mid + df * (fwd - q.strike))
        kept.append(q)
    kept.sort(key=lambda q: (q.expiry, q.strike))
    return kept, dropped


@dataclass(frozen=True)
class SurfaceGrid:
    """Implied vols on tau pillars with per-pillar k columns.

    vol(tau, k) interpolates linearly in k within a pillar slice (flat beyond
    the quoted range) and linearly in total variance w = sigma^2 tau across
    pillars, anchored at w = 0 for tau = 0.  Beyond the last pillar the vol is
    held flat.
    """

    taus: np.ndarray            # (nt,)
    k_columns: np.ndarray       # (nt, nk)
    vols: np.ndarray            # (nt, nk)
    term: TermStructure

    def __post_init__(self):
        if np.any(np.asarray(self.vols) <= 0):
            raise ValueError("grid vols must be positive")

    def slice_vol(self, j: int, k):
        return np.interp(k, self.k_columns[j], self.vols[j])

    def vol(self, tau, k):
        taus = self.taus
        if tau <= taus[0]:
            # w linear through (0, 0) keeps sigma constant below the first pillar
            return self.slice_vol(0, k)
        if tau >= taus[-1]:
            return self.slice_vol(len(taus) - 1, k)
        j = int(np.searchsorted(taus, tau, side="right")) - 1
        wa = self.slice_vol(j, k) ** 2 * taus[j]
        wb = self.slice_vol(j + 1, k) ** 2 * taus[j + 1]
        lam = (tau - taus[j]) / (taus[j + 1] - taus[j])
        w = (1.0 - lam) * wa + lam * wb
        return np.sqrt(w / tau)

    def price(self, tau, k):
        """Normalized call price (divided by DF * F) at (tau, k)."""
        sig = self.vol(tau, k)
        return bs.price_kernel(k, tau, +1, 1.0, 1.0, sig)

    def node_prices(self):
        out = np.empty_like(self.vols)
        for j in range(len(self.taus)):
            out[j] = bs.price_kernel(self.k_columns[j], self.taus[j], +1, 1.0, 1.0,
                                     self.vols[j])
        return out

    def with_vols(self, vols) -> "SurfaceGrid":
        return SurfaceGrid(self.taus, self.k_columns, np.asarray(vols, float), self.term)


def _slice_slope(k_nodes, vols, k):
    """Slope of the piecewise-linear smile; node queries average adjacent secants."""
    k_nodes = np.asarray(k_nodes, float)
    vols = np.asarray(vols, float)
    sec = np.diff(vols) / np.diff(k_nodes)
    if k <= k_nodes[0] or k >= k_nodes[-1]:
        return 0.0  # flat extrapolation
    hit = np.nonzero(np.isclose(k, k_nodes, rtol=0.0, atol=1e-12))[0]
    if hit.size:
        i = int(hit[0])
        if 0 < i < len(k_nodes) - 1:
            return 0.5 * (sec[i - 1] + sec[i])
        return float(sec[0] if i == 0 else sec[-1])
    i = int(np.searchsorted(k_nodes, k)) - 1
    return float(sec[i])


def smile_slope(grid: SurfaceGrid, tau, k):
    """d(sigma)/dk of the grid representation at (tau, k).

    Differentiates the interpolation exactly: within a pillar it is the
    piecewise slope (averaged at interior nodes); between pillars the total
    variance interpolation gives
    d_k sigma = (lam 2 sig_a sig_a' tau_a + (1-lam) 2 sig_b sig_b' tau_b) / (2 sig tau).
    Outside the k hull the flat extrapolation makes the slope zero (flagged).
    """
    taus = grid.taus
    if tau <= taus[0] or tau >= taus[-1]:
        j = 0 if tau <= taus[0] else len(taus) - 1
        if k <= grid.k_columns[j][0] or k >= grid.k_columns[j][-1]:
            warnings.warn("smile slope queried outside the grid hull; flat "
                          "extrapolation makes the boundary slope 0",
                          ExtrapolationWarning, stacklevel=2)
        return _slice_slope(grid.k_columns[j], grid.vols[j], k)
    j = int(np.searchsorted(taus, tau, side="right")) - 1
    ka, kb = grid.k_columns[j], grid.k_columns[j + 1]
    if k <= min(ka[0], kb[0]) or k >= max(ka[-1], kb[-1]):
        warnings.warn("smile slope queried outside the grid hull; flat "
                      "extrapolation makes the boundary slope 0",
                      ExtrapolationWarning, stacklevel=2)
    sa = float(grid.slice_vol(j, k))
    sb = float(grid.slice_vol(j + 1, k))
    da = _slice_slope(ka, grid.vols[j], k)
    db = _slice_slope(kb, grid.vols[j + 1], k)
    ta, tb = taus[j], taus[j + 1]
    lam = (tau - ta) / (tb - ta)
    dw = (1.0 - lam) * 2.0 * sa * da * ta + lam * 2.0 * sb * db * tb
    sig = float(grid.vol(tau, k))
    return dw / (2.0 * sig * tau)


@dataclass(frozen=True)
class ArbViolation:
    tau: float
    k: float
    kind: str      # lower_bound / upper_bound / k_monotonicity / k_convexity / tau_monotonicity
    amount: float


def _project_slice(prices, k_nodes, lower, upper, extra_lower=None):
    """L2 projection onto {decreasing, convex in k, within [lower, upper]}.

    extra_lower adds per-node floors (used for the tau-monotonicity repair).
    """
    from cvxopt import matrix, solvers

    n = len(prices)
    lo = np.maximum(lower, extra_lower) if extra_lower is not None else lower
    rows = []
    rhs = []
    for i in range(n - 1):  # decreasing: x_{i+1} - x_i <= 0
        r = np.zeros(n)
        r[i + 1], r[i] = 1.0, -1.0
        rows.append(r)
        rhs.append(0.0)
    for i in range(1, n - 1):  # convex: second divided difference >= 0
        h0 = k_nodes[i] - k_nodes[i - 1]
        h1 = k_nodes[i + 1] - k_nodes[i]
        r = np.zeros(n)
        r[i - 1] = -1.0 / h0
        r[i] = 1.0 / h0 + 1.0 / h1
        r[i + 1] = -1.0 / h1
        rows.append(r)
        rhs.append(0.0)
    G = np.vstack([np.array(rows), -np.eye(n), np.eye(n)])
    h = np.concatenate([np.array(rhs), -lo, upper])
    P = matrix(np.eye(n))
    q = matrix(-np.asarray(prices, float))
    opts = {"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-11}
    sol = solvers.qp(P, q, matrix(G), matrix(h), options=opts)
    if sol["status"] not in ("optimal", "unknown"):
        raise RuntimeError(f"slice projection failed: {sol['status']}")
    return np.asarray(sol["x"]).ravel()


def _slice_violations(tau, k_nodes, prices, tol=ARB_TOL):
    lower = np.maximum(1.0 - np.exp(k_nodes), 0.0)
    out = []
    for i, (k, p) in enumerate(zip(k_nodes, prices)):
        if p < lower[i] - tol:
            out.append(ArbViolation(tau, k, "lower_bound", lower[i] - p))
        if p > 1.0 + tol:
            out.append(ArbViolation(tau, k, "upper_bound", p - 1.0))
    mono = np.diff(prices)
    for i in np.nonzero(mono > tol)[0]:
        out.append(ArbViolation(tau, k_nodes[i + 1], "k_monotonicity", mono[i]))
    for i in range(1, len(prices) - 1):
        h0 = k_nodes[i] - k_nodes[i - 1]
        h1 = k_nodes[i + 1] - k_nodes[i]
        d2 = (prices[i + 1] - prices[i]) / h1 - (prices[i] - prices[i - 1]) / h0
        if d2 < -tol:
            out.append(ArbViolation(tau, k_nodes[i], "k_convexity", -d2))
    return out


def _interp_extend(k_nodes, prices, k):
    """Piecewise-linear interpolation extended by its edge tangents (stays convex)."""
    k = np.asarray(k, float)
    out = np.interp(k, k_nodes, prices)
    if len(k_nodes) > 1:
        slope_l = (prices[1] - prices[0]) / (k_nodes[1] - k_nodes[0])
        slope_r = (prices[-1] - prices[-2]) / (k_nodes[-1] - k_nodes[-2])
        out = np.where(k < k_nodes[0], prices[0] + slope_l * (k - k_nodes[0]), out)
        out = np.where(k > k_nodes[-1], prices[-1] + slope_r * (k - k_nodes[-1]), out)
    return np.minimum(out, 1.0)


def detect_price_violations(taus, k_columns, prices, tol: float = ARB_TOL):
    """Static-arbitrage violations of a normalized-price surface.

    Checks price bounds, k-monotonicity and k-convexity per slice, and
    tau-monotonicity across slices through each slice's piecewise-linear
    interpolant (tangent-extended beyond its range).
    """
    nt = len(taus)
    violations = []
    for j in range(nt):
        violations.extend(_slice_violations(taus[j], k_columns[j], prices[j], tol))
    for j in range(1, nt):
        prev = _interp_extend(k_columns[j - 1], prices[j - 1], k_columns[j])
        gap = prev - prices[j]
        for i in np.nonzero(gap > tol)[0]:
            violations.append(ArbViolation(taus[j], k_columns[j][i],
                                           "tau_monotonicity", gap[i]))
    return violations


def repair_prices(taus, k_columns, prices, tol: float = ARB_TOL):
    """Minimal-change repair of a normalized-price surface.

    Each slice is projected onto the decreasing-convex cone inside the price
    bounds; tau-monotonicity then propagates by running maxima from the
    shortest pillar up, re-projecting when the maxima re-introduce a kink.
    """
    nt = len(taus)
    repaired = np.array(prices, dtype=float, copy=True)
    for j in range(nt):
        k_nodes = k_columns[j]
        lower = np.maximum(1.0 - np.exp(k_nodes), 0.0)
        if _slice_violations(taus[j], k_nodes, repaired[j], tol):
            repaired[j] = _project_slice(repaired[j], k_nodes, lower, np.ones_like(lower))
        if j > 0:
            prev = _interp_extend(k_columns[j - 1], repaired[j - 1], k_nodes)
            if np.any(prev > repaired[j] + tol):
                merged = np.maximum(repaired[j], prev)
                if _slice_violations(taus[j], k_nodes, merged, tol):
                    merged = _project_slice(merged, k_nodes, lower, np.ones_like(lower),
                                            extra_lower=prev)
                repaired[j] = merged
    return repaired


def static_arbitrage_report(grid: SurfaceGrid, tol: float = ARB_TOL):
    """Detect static-arbitrage violations and return (violations, repaired grid).

    The report lists the violations of the input grid; the repaired grid is
    the identity when the input is already clean, otherwise the repaired node
    prices are re-inverted to vols.
    """
    prices = grid.node_prices()
    violations = detect_price_violations(grid.taus, grid.k_columns, prices, tol)
    repaired = repair_prices(grid.taus, grid.k_columns, prices, tol)
    nt = len(grid.taus)

    if violations:
        eps = 1e-10
        new_vols = np.empty_like(repaired)
        for j in range(nt):
            k_nodes = grid.k_columns[j]
            lower = np.maximum(1.0 - np.exp(k_nodes), 0.0)
            clamped = np.clip(repaired[j], lower + eps, 1.0 - eps)
            # tighter-than-default inversion: the convexity certificate divides
            # by squared node spacings, which amplifies price round-trip noise
            new_vols[j] = bs.implied_vol_vec(clamped, k_nodes, grid.taus[j], +1,
                                             1.0, 1.0, price_tol=1e-14)
        repaired_grid = grid.with_vols(new_vols)
    else:
        repaired_grid = grid  # identity on arbitrage-free input
    return violations, repaired_grid


def build_surface_grid(calls, term: TermStructure,
                       tau_days=GRID_TAU_DAYS, deltas=DELTA_POINTS) -> SurfaceGrid:
    """Fixed (tau, k) grid from sanitized call-equivalent quotes.

    k columns come from the delta points at the symbolic volatility; implied
    vols are linear in k within each quoted expiry (flat beyond the quoted
    range), total variance is linear in tau with a w = 0 anchor, flat vol
    beyond the last quoted expiry.  The returned grid is arbitrage-repaired.
    """
    by_expiry = {}
    for q in calls:
        by_expiry.setdefault(q.expiry, []).append(q)
    slices = []
    for expiry in sorted(by_expiry):
        qs = by_expiry[expiry]
        if len(qs) < 2:
            warnings.warn(f"expiry {expiry} has {len(qs)} usable quote(s); skipped",
                          stacklevel=2)
            continue
        tau = qs[0].tau
        fwd = float(term.forward(tau))
        df = float(term.discount(tau))
        ks = np.array([np.log(q.strike / fwd) for q in qs])
        mids = np.array([q.mid for q in qs])
        lower = df * fwd * np.maximum(1.0 - np.exp(ks), 0.0)
        live = (mids > lower + 1e-10 * df * fwd) & (mids < df * fwd * (1 - 1e-12))
        if np.count_nonzero(live) < len(qs):
            warnings.warn(f"expiry {expiry}: {len(qs) - int(np.count_nonzero(live))} "
                          "quote(s) at a price bound dropped", stacklevel=2)
        if np.count_nonzero(live) < 2:
            warnings.warn(f"expiry {expiry} has fewer than two invertible quotes; "
                          "skipped", stacklevel=2)
            continue
        ks, mids = ks[live], mids[live]
        vols = bs.implied_vol_vec(mids, ks, tau, +1, fwd, df)
        order = np.argsort(ks)
        slices.append((tau, ks[order], vols[order]))
    if not slices:
        raise EmptySurfaceError("no expiry slice with at least two quotes")
    slices.sort(key=lambda s: s[0])
    taus_e = np.array([s[0] for s in slices])

    taus = np.asarray(tau_days, dtype=float) / DAYS_PER_YEAR
    nk = len(deltas)
    k_columns = np.empty((len(taus), nk))
    vols = np.empty((len(taus), nk))
    for j, tau in enumerate(taus):
        kcol = np.sort(delta_to_k(np.asarray(deltas), tau))
        k_columns[j] = kcol
        sig_e = np.vstack([np.interp(kcol, s[1], s[2]) for s in slices])
        w_e = sig_e * sig_e * taus_e[:, None]
        for i in range(nk):
            if tau >= taus_e[-1]:
                w = sig_e[-1, i] ** 2 * tau  # flat vol beyond the last expiry
            else:
                w = np.interp(tau, np.concatenate([[0.0], taus_e]),
                              np.concatenate([[0.0], w_e[:, i]]))
            vols[j, i] = np.sqrt(w / tau)
    grid = SurfaceGrid(taus, k_columns, vols, term)
    _, repaired = static_arbitrage_report(grid)
    return repaired


# ---------------------------------------------------------------- CSV formats

CHAIN_HEADER = ["as_of", "expiry", "omega", "strike", "mid", "volume"]
GRID_HEADER = ["tau_days", "k", "sigma"]


def read_chain_csv(path) -> list[OptionQuote]:
    quotes = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CHAIN_HEADER:
            raise ValueError(f"chain CSV header must be {','.join(CHAIN_HEADER)}")
        for row in reader:
            quotes.append(OptionQuote(
                as_of=dt.date.fromisoformat(row["as_of"]),
                expiry=dt.date.fromisoformat(row["expiry"]),
                omega=int(row["omega"]),
                strike=float(row["strike"]),
                mid=float(row["mid"]),
                volume=float(row["volume"]),
            ))
    return quotes


def write_chain_csv(path, quotes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CHAIN_HEADER)
        for q in quotes:
            w.writerow([q.as_of.isoformat(), q.expiry.isoformat(), int(q.omega),
                        repr(float(q.strike)), repr(float(q.mid)),
                        repr(float(q.volume))])


def write_grid_csv(path, grid: SurfaceGrid):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GRID_HEADER)
        for j, tau in enumerate(grid.taus):
            for k, sig in zip(grid.k_columns[j], grid.vols[j]):
                w.writerow([repr(float(tau) * DAYS_PER_YEAR), repr(float(k)),
                            repr(float(sig))])


def read_grid_csv(path, term: TermStructure) -> SurfaceGrid:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != GRID_HEADER:
            raise ValueError(f"grid CSV header must be {','.join(GRID_HEADER)}")
        for row in reader:
            rows.append((float(row["tau_days"]), float(row["k"]), float(row["sigma"])))
    taus = sorted({r[0] for r in rows})
    k_cols, vols = [], []
    for td in taus:
        slice_rows = sorted([r for r in rows if r[0] == td], key=lambda r: r[1])
        k_cols.append([r[1] for r in slice_rows])
        vols.append([r[2] for r in slice_rows])
    if len({len(c) for c in k_cols}) != 1:
        raise ValueError("grid CSV slices must share the column count")
    return SurfaceGrid(np.asarray(taus) / DAYS_PER_YEAR, np.asarray(k_cols),
                       np.asarray(vols), term)
