"""VaR computations in the affine factor model.

The portfolio P&L over the horizon h decomposes exactly as

    P&L = A(h, S_{t+h}) + B(h, S_{t+h}) . (xi_{t+h} - xi_t)

with A and B sums over positions of discounted-forward-weighted surface
values at the rolled-down maturity and spot-shifted moneyness.  Conditional on
S_{t+h} = s the P&L is Gaussian with mean Ahat(h,s) = A + B.m(s) and standard
deviation |Bhat(h,s)| = |B . sqrt(h) sigma b|, which gives:

  - the quasi-explicit VaR: the root v of
        1 - theta = Integral Phi((v - Ahat(h,s)) / |Bhat(h,s)|) dF_S(s),
    evaluated by Gauss-Hermite quadrature after the lognormal substitution;
  - the closed short-term VaR Phi^{-1}(1-theta) sqrt(c^2 + q^2) sqrt(h) with
        c = S beta sum_i pi_i DF_i f_i [c_i - 1_put(i) - d_k c_i] + B(0,S).sigma.p_s_xi
        q = |B(0,S).sigma.b|,
    plus a normal-spot twin and a t-Student variant through the mixed
    variable Z = (qX + cY)/sqrt(c^2 + q^2);
  - the empirical VaR: a one-step frozen-coefficient simulation repriced
    through the same surface interpolants, so the Monte-Carlo route and the
    quadrature route share every pricing ingredient.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .. import bs, mc
from ..estimators import empirical_quantile
from ..portfolio import Portfolio
from ..shortterm import sample_Z
from .model import AffineModel, sym_sqrt_psd

_BNORM_TINY = 1e-300


class QuadratureError(RuntimeError):
    """Gauss-Hermite node doubling failed to converge."""


class BracketingError(RuntimeError):
    """The outer root-find could not bracket the VaR."""


def b_factor(model: AffineModel):
    """Matrix b with b b^T = P_xi - p_s_xi p_s_xi^T (symmetric PSD root)."""
    p = model.corr.p_s_xi
    mat = model.corr.p_xi - np.outer(p, p)
    return sym_sqrt_psd(mat, warn_label="conditional factor correlation")


def conditional_moments(model: AffineModel, h: float, s):
    """Moments of xi_{t+h} - xi_t given S_{t+h} = s: (m, V, b).

    m(s) = mu h + (log(s/S_t) - (alpha - beta^2/2) h) / beta * sigma . p_s_xi
    V    = h (sigma b)(sigma b)^T.
    beta = 0 degenerates to the unconditional moments (m = mu h, b from P_xi).
    """
    dyn = model.dyn
    b = b_factor(model) if dyn.beta > 0 else sym_sqrt_psd(model.corr.p_xi)
    sb = dyn.sigma @ b
    V = h * sb @ sb.T
    s = np.asarray(s, dtype=float)
    if dyn.beta > 0:
        z = (np.log(s / model.term.spot) - (dyn.alpha - 0.5 * dyn.beta ** 2) * h) / dyn.beta
        m = dyn.mu * h + z[..., None] * (dyn.sigma @ model.corr.p_s_xi)
    else:
        m = np.broadcast_to(dyn.mu * h, s.shape + (model.d,)).copy()
    return m, V, b


@dataclass
class _Leg:
    quantity: float
    is_put: bool
    strike: float
    tau: float
    # populated per horizon: discounted-forward weight and surface interpolant
    df: float = 0.0
    f: float = 0.0
    kgrid: np.ndarray | None = None
    g0v: np.ndarray | None = None
    gv: np.ndarray | None = None


class PnlCoeffs:
    """A(h, s), B(h, s) and the conditional forms Ahat, Bhat for one portfolio.

    Surface values at the rolled-down maturities are cached per horizon as
    piecewise-linear interpolants in k (regression-mode surfaces are sampled
    on a refined breakpoint grid first), so the quadrature, the closed formula
    and the simulation all price through identical ingredients.
    """

    def __init__(self, model: AffineModel, portfolio: Portfolio,
                 s_t: float | None = None, xi_t=None):
        if portfolio.spot_quantity != 0.0:
            raise ValueError("the affine model prices option legs only")
        self.model = model
        self.s_t = model.term.spot if s_t is None else float(s_t)
        self.xi_t = np.asarray(model.xi_t if xi_t is None else xi_t, dtype=float)
        self.legs = [
            _Leg(p.quantity, p.omega < 0, p.strike, p.tau) for p in portfolio
        ]
        self._by_h: dict[float, list[_Leg]] = {}
        self._sb = model.dyn.sigma @ (b_factor(model) if model.dyn.beta > 0
                                      else sym_sqrt_psd(model.corr.p_xi))
        self.value_t = self._portfolio_value()

    def _legs_at(self, h: float) -> list[_Leg]:
        key = float(h)
        if key not in self._by_h:
            model, term = self.model, self.model.term
            refined = self.model.interp == "regression"
            out = []
            for leg in self.legs:
                tau_h = leg.tau - h
                if tau_h <= 0:
                    raise ValueError("position expires inside the horizon")
                lg = _Leg(leg.quantity, leg.is_put, leg.strike, leg.tau)
                lg.df = float(term.discount(tau_h))
                lg.f = float(term.fwd_ratio(tau_h))
                lg.kgrid = model.k_breakpoints(tau_h, refine=8 if refined else 1)
                lg.g0v, lg.gv = model.surface_values(tau_h, lg.kgrid)
                out.append(lg)
            self._by_h[key] = out
        return self._by_h[key]

    def _portfolio_value(self) -> float:
        return float(self.a_raw(0.0, np.asarray(self.s_t)))

    # A before subtracting the time-t value; a() subtracts it.
    def a_raw(self, h: float, s):
        s = np.asarray(s, dtype=float)
        total = np.zeros(s.shape)
        for lg in self._legs_at(h):
            k = np.log(lg.strike / (lg.f * s))
            cval = np.interp(k, lg.kgrid, lg.g0v) \
                + _interp_cols(k, lg.kgrid, lg.gv) @ self.xi_t
            term_val = lg.df * lg.f * s * (cval - (1.0 if lg.is_put else 0.0))
            if lg.is_put:
                term_val = term_val + lg.df * lg.strike
            total = total + lg.quantity * term_val
        return total

    def a(self, h: float, s):
        """A(h, s): P&L of the deterministic-factor part; a(0, S_t) = 0 exactly."""
        return self.a_raw(h, s) - self.value_t

    def b(self, h: float, s):
        """B(h, s), shape s.shape + (d,)."""
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (self.model.d,))
        for lg in self._legs_at(h):
            k = np.log(lg.strike / (lg.f * s))
            gv = _interp_cols(k, lg.kgrid, lg.gv)
            out = out + (lg.quantity * lg.df * lg.f) * s[..., None] * gv
        return out

    def a_hat(self, h: float, s):
        """Ahat(h, s) = A(h, s) + B(h, s) . m(s)."""
        m, _, _ = conditional_moments(self.model, h, s)
        return self.a(h, s) + np.einsum("...d,...d->...", self.b(h, s), m)

    def b_hat(self, h: float, s):
        """Bhat(h, s) = B(h, s) . sqrt(h) sigma b, shape s.shape + (d,)."""
        return np.sqrt(h) * self.b(h, s) @ self._sb


def _interp_cols(x, xp, cols):
    """np.interp applied column-wise: cols is (m, d), returns x.shape + (d,)."""
    d = cols.shape[1]
    out = np.empty(np.shape(x) + (d,))
    for i in range(d):
        out[..., i] = np.interp(x, xp, cols[:, i])
    return out


def pnl_coeffs(model: AffineModel, portfolio: Portfolio, s_t=None, xi_t=None,
               term=None) -> PnlCoeffs:
    """P&L coefficient functions for the portfolio (term defaults to the model's)."""
    if term is not None and term is not model.term:
        model = _with_term(model, term)
    return PnlCoeffs(model, portfolio, s_t, xi_t)


def _with_term(model: AffineModel, term) -> AffineModel:
    out = AffineModel(model.taus, model.k_columns, model.g0, model.g,
                      model.xi_history, model.dyn, model.corr, term,
                      model.interp, model.price_history)
    return out


def _closed_cq(model: AffineModel, coeffs: PnlCoeffs):
    """(c_t, q_t) of the closed formula, put-extended.

    c_t sums DF f [surface value - 1_put - d_k surface value] over positions,
    scaled by S beta, plus the cross term B(0,S).sigma.p_s_xi; derivatives in k
    average the backward and forward finite differences of the interpolant.
    """
    s_t, xi_t = coeffs.s_t, coeffs.xi_t
    dyn, corr = model.dyn, model.corr
    acc = 0.0
    for lg in coeffs._legs_at(0.0):
        k = np.log(lg.strike / (lg.f * s_t))
        cvals = lg.g0v + lg.gv @ xi_t
        cval = float(np.interp(k, lg.kgrid, cvals))
        slope = _node_slope(lg.kgrid, cvals, k)
        acc += lg.quantity * lg.df * lg.f * (cval - (1.0 if lg.is_put else 0.0) - slope)
    b0 = coeffs.b(0.0, np.asarray(s_t))
    c = s_t * dyn.beta * acc + float(b0 @ (dyn.sigma @ corr.p_s_xi))
    q = float(np.linalg.norm(b0 @ coeffs._sb))
    return c, q


def _node_slope(kgrid, vals, k):
    """Piecewise-linear slope; node hits average the adjacent secants."""
    sec = np.diff(vals) / np.diff(kgrid)
    if k <= kgrid[0] or k >= kgrid[-1]:
        return 0.0
    hit = np.nonzero(np.isclose(k, kgrid, rtol=0.0, atol=1e-12))[0]
    if hit.size:
        i = int(hit[0])
        if 0 < i < len(kgrid) - 1:
            return float(0.5 * (sec[i - 1] + sec[i]))
        return float(sec[0] if i == 0 else sec[-1])
    return float(sec[int(np.searchsorted(kgrid, k)) - 1])


def closed_var(model: AffineModel, portfolio: Portfolio, theta: float, h: float,
               variant: str = "gaussian", nu: float | None = None,
               n_draws: int = 200_000, seed: int = 0, s_t=None, xi_t=None) -> float:
    """Closed short-term VaR; variant in {gaussian, normal_spot, tstudent}.

    gaussian (lognormal spot) and normal_spot share the value
    Phi^{-1}(1-theta) sqrt(c^2+q^2) sqrt(h); the t-variant replaces the
    Gaussian quantile by the empirical quantile of Z = (qX + cY)/sqrt(c^2+q^2)
    with X standard normal and Y standard t(nu).
    """
    coeffs = pnl_coeffs(model, portfolio, s_t, xi_t)
    c, q = _closed_cq(model, coeffs)
    s = np.hypot(c, q)
    if variant in ("gaussian", "normal_spot"):
        return float(bs.norm_ppf(1.0 - theta) * s * np.sqrt(h))
    if variant == "tstudent":
        if nu is None or nu <= 2:
            raise ValueError("tstudent variant needs nu > 2")
        if s == 0.0:
            return 0.0
        z = sample_Z(c, q, 0.0, nu, n_draws, seed)
        return float(empirical_quantile(z, 1.0 - theta) * s * np.sqrt(h))
    raise ValueError(f"unknown variant {variant!r}")


def closed_var_d1(model: AffineModel, portfolio: Portfolio, theta: float, h: float,
                  s_t=None, xi_t=None) -> float:
    """d = 1 corollary expression, written through dPi/dS and dPi/dxi.

    Kept as an independent code path; it must agree with closed_var to
    floating-point accuracy.
    """
    if model.d != 1:
        raise ValueError("corollary path requires d = 1")
    coeffs = pnl_coeffs(model, portfolio, s_t, xi_t)
    s_t = coeffs.s_t
    dyn, corr = model.dyn, model.corr
    dpi_ds = 0.0
    for lg in coeffs._legs_at(0.0):
        k = np.log(lg.strike / (lg.f * s_t))
        cvals = lg.g0v + lg.gv @ coeffs.xi_t
        cval = float(np.interp(k, lg.kgrid, cvals))
        slope = _node_slope(lg.kgrid, cvals, k)
        dpi_ds += lg.quantity * lg.df * lg.f * (cval - slope - (1.0 if lg.is_put else 0.0))
    dpi_dxi = float(coeffs.b(0.0, np.asarray(s_t))[0])
    sigma = float(dyn.sigma[0, 0])
    p = float(corr.p_s_xi[0])
    rad = ((s_t * dyn.beta * dpi_ds) ** 2 + (sigma * dpi_dxi) ** 2
           + 2.0 * p * s_t * dyn.beta * sigma * dpi_ds * dpi_dxi)
    return float(bs.norm_ppf(1.0 - theta) * np.sqrt(max(rad, 0.0)) * np.sqrt(h))


class _MixtureCdf:
    """P(P&L <= v) as the Gaussian-mixture integral over the spot distribution.

    After the substitution s(z) = S_t exp(beta sqrt(h) z + (alpha - beta^2/2) h)
    every position's moneyness is linear in z, so the surface-interpolation
    breakpoints and the zeros of the conditional-vol vector Bhat split the axis
    into panels on which the integrand Phi((v - Ahat)/|Bhat|) is smooth.
    Panels saturated at 0 or 1 contribute their exact Gaussian mass; the rest
    are integrated by Gauss-Legendre with local bisection until the doubled
    node count agrees to the panel's share of the tolerance.
    """

    SCREEN = 12.0   # |argument| beyond which Phi is 0/1 to ~1e-33

    def __init__(self, coeffs: PnlCoeffs, h: float, quad_tol: float,
                 y_max: float = 10.0):
        self.coeffs = coeffs
        self.h = h
        dyn = coeffs.model.dyn
        self._drift = (dyn.alpha - 0.5 * dyn.beta ** 2) * h
        self._bsq = dyn.beta * np.sqrt(h)
        edges = [-y_max, y_max]
        for lg in coeffs._legs_at(h):
            k0 = np.log(lg.strike / (lg.f * coeffs.s_t))
            z = (k0 - self._drift - lg.kgrid) / self._bsq
            edges.extend(z[(z > -y_max) & (z < y_max)])
        edges.extend(np.linspace(-y_max, y_max, 21))   # cap panel width
        edges = np.asarray(sorted(set(np.asarray(edges, dtype=float))))

        # Between breakpoints each Bhat component equals s(z) * (linear in z):
        # a sign change pins an exact zero of the conditional vol.
        comp = coeffs.b_hat(h, self._s_of(edges)) / self._s_of(edges)[:, None]
        crossings = []
        for j in range(coeffs.model.d):
            f0, f1 = comp[:-1, j], comp[1:, j]
            idx = np.nonzero((f0 * f1) < 0.0)[0]
            z0, z1 = edges[idx], edges[idx + 1]
            crossings.extend(z0 - f0[idx] * (z1 - z0) / (f1[idx] - f0[idx]))
        if crossings:
            cross = np.asarray(crossings)
            edges = np.unique(np.concatenate([edges, cross[(cross > -y_max)
                                                           & (cross < y_max)]]))
        self.edges = edges
        # 5-point screen values per panel (edges, quarters, midpoints)
        probes = np.linspace(edges[:-1], edges[1:], 5, axis=1)
        pa, pb = self._eval(probes.ravel())
        self._probe_a = pa.reshape(probes.shape)
        self._probe_b = pb.reshape(probes.shape)
        self.mass = bs.norm_cdf(edges[1:]) - bs.norm_cdf(edges[:-1])
        self._tol_panel = quad_tol / max(len(self.mass), 1)
        self._gl = {n: np.polynomial.legendre.leggauss(n) for n in (16, 32)}

    def _s_of(self, z):
        return self.coeffs.s_t * np.exp(self._bsq * np.asarray(z) + self._drift)

    def _eval(self, z):
        s = self._s_of(z)
        a = self.coeffs.a_hat(self.h, s)
        b = np.linalg.norm(self.coeffs.b_hat(self.h, s), axis=-1)
        return a, b

    def _gl_piece(self, z0, z1, v, n):
        xg, wg = self._gl[n]
        zz = 0.5 * (z0 + z1) + 0.5 * (z1 - z0) * xg
        ww = 0.5 * (z1 - z0) * wg * bs.norm_pdf(zz)
        a, b = self._eval(zz)
        live = b > _BNORM_TINY
        vals = np.where(live, bs.norm_cdf((v - a) / np.where(live, b, 1.0)),
                        (v >= a).astype(float))
        return float(ww @ vals)

    def _adaptive(self, z0, z1, v, depth):
        i16 = self._gl_piece(z0, z1, v, 16)
        i32 = self._gl_piece(z0, z1, v, 32)
        if abs(i32 - i16) <= self._tol_panel * 0.5 ** depth or depth >= 38:
            return i32
        zm = 0.5 * (z0 + z1)
        return (self._adaptive(z0, zm, v, depth + 1)
                + self._adaptive(zm, z1, v, depth + 1))

    def __call__(self, v: float) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            arg = np.where(self._probe_b > _BNORM_TINY,
                           (v - self._probe_a) / np.where(self._probe_b > _BNORM_TINY,
                                                          self._probe_b, 1.0),
                           np.where(v >= self._probe_a, np.inf, -np.inf))
        lo = arg.min(axis=1)
        hi = arg.max(axis=1)
        total = float(self.mass[lo > self.SCREEN].sum())
        active = np.nonzero((lo <= self.SCREEN) & (hi >= -self.SCREEN))[0]
        for i in active:
            total += self._adaptive(self.edges[i], self.edges[i + 1], v, 0)
        return total


def quasi_explicit_var(model: AffineModel, portfolio: Portfolio, theta: float,
                       h: float, s_t=None, xi_t=None, quad_tol: float = 1e-8,
                       max_expansions: int = 60) -> float:
    """Quasi-explicit VaR: root of the conditional-Gaussian mixture CDF.

    Lognormal spot.  The mixture CDF is integrated on kink-aligned panels with
    node-doubled Gauss-Legendre (local bisection where the doubling test
    fails); the outer safeguarded root-find is seeded by the closed formula
    and expands its bracket geometrically.  A point with |Bhat| = 0
    contributes the indicator 1{v >= Ahat}.
    """
    coeffs = pnl_coeffs(model, portfolio, s_t, xi_t)
    dyn = model.dyn
    p_target = 1.0 - theta

    if dyn.beta == 0.0:
        s_det = coeffs.s_t * np.exp(dyn.alpha * h)
        a_hat = float(coeffs.a_hat(h, np.asarray(s_det)))
        b_norm = float(np.linalg.norm(coeffs.b_hat(h, np.asarray(s_det))))
        return a_hat + float(bs.norm_ppf(p_target)) * b_norm

    cdf = _MixtureCdf(coeffs, h, quad_tol)

    # sigma ~ 0: the P&L is the deterministic curve Ahat(S'); the CDF is a
    # step mixture, so take the weighted quantile of Ahat on a dense grid.
    if np.all(cdf._probe_b <= _BNORM_TINY):
        z_dense = np.unique(np.linspace(cdf.edges[:-1], cdf.edges[1:], 33,
                                        axis=1).ravel())
        cell = np.concatenate([[z_dense[0]], 0.5 * (z_dense[1:] + z_dense[:-1]),
                               [z_dense[-1]]])
        w_dense = bs.norm_cdf(cell[1:]) - bs.norm_cdf(cell[:-1])
        w_dense[0] += float(bs.norm_cdf(z_dense[0]))          # left tail
        w_dense[-1] += 1.0 - float(bs.norm_cdf(z_dense[-1]))  # right tail
        a_dense, _ = cdf._eval(z_dense)
        order = np.argsort(a_dense)
        cum = np.cumsum(w_dense[order])
        pos = int(np.searchsorted(cum, p_target))
        return float(a_dense[order][min(pos, len(order) - 1)])

    seed_var = closed_var(model, portfolio, theta, h,
                          s_t=coeffs.s_t, xi_t=coeffs.xi_t)
    scale = max(abs(seed_var), 1e-12 * coeffs.s_t, 1e-300)

    lo = hi = seed_var
    width = scale
    for _ in range(max_expansions):
        if cdf(lo) <= p_target:
            break
        width *= 2.0
        lo -= width
    else:
        raise BracketingError("could not bracket the VaR from below")
    width = scale
    for _ in range(max_expansions):
        if cdf(hi) >= p_target:
            break
        width *= 2.0
        hi += width
    else:
        raise BracketingError("could not bracket the VaR from above")
    return float(brentq(lambda x: cdf(x) - p_target, lo, hi,
                        xtol=1e-14 * max(1.0, abs(seed_var)), rtol=8.9e-16))


def empirical_var(model: AffineModel, portfolio: Portfolio, theta: float, h: float,
                  n_sims: int, seed: int, s_t=None, xi_t=None, n_workers: int = 1,
                  return_diagnostics: bool = False):
    """Monte-Carlo VaR from the one-step frozen-coefficient scheme.

    Draws (dW0, dW) ~ N(0, h P), rolls the portfolio to (tau - h) at the
    spot-shifted moneyness through the same interpolants as the quadrature,
    de-normalizes under constant rates, and takes the empirical quantile of
    the P&L.  Simulated normalized prices outside [intrinsic, 1] are counted
    in the diagnostics, never clamped.
    """
    if n_sims < 1000:
        raise ValueError("n_sims must be at least 1000")
    coeffs = pnl_coeffs(model, portfolio, s_t, xi_t)
    dyn = model.dyn
    d = model.d
    full = model.corr.full()
    root = sym_sqrt_psd(full, warn_label="joint correlation matrix")
    z = mc.standard_normals(seed, n_sims, 1 + d, n_workers=n_workers)
    dw = np.sqrt(h) * z @ root.T
    s_new = coeffs.s_t * np.exp((dyn.alpha - 0.5 * dyn.beta ** 2) * h
                                + dyn.beta * dw[:, 0])
    dxi = dyn.mu * h + dw[:, 1:] @ dyn.sigma.T
    xi_new = coeffs.xi_t + dxi

    pnl = np.zeros(n_sims)
    out_of_bounds = 0
    for lg in coeffs._legs_at(h):
        k = np.log(lg.strike / (lg.f * s_new))
        cval = np.interp(k, lg.kgrid, lg.g0v) + \
            np.einsum("sd,sd->s", _interp_cols(k, lg.kgrid, lg.gv), xi_new)
        intrinsic = np.maximum(1.0 - np.exp(k), 0.0)
        out_of_bounds += int(np.count_nonzero((cval < intrinsic - 1e-12)
                                              | (cval > 1.0 + 1e-12)))
        price = lg.df * lg.f * s_new * (cval - (1.0 if lg.is_put else 0.0))
        if lg.is_put:
            price = price + lg.df * lg.strike
        pnl += lg.quantity * price
    pnl -= coeffs.value_t
    var = float(empirical_quantile(pnl, 1.0 - theta))
    if return_diagnostics:
        return var, {"pnl": pnl, "out_of_bounds": out_of_bounds}
    return var
