"""Shared synthetic model builders for the affine VaR tests.

Two families:

  random_instance      -- dense lattice, positions anywhere in the hull; used
                          for the Monte-Carlo cross-validation at realistic
                          one-day horizons.
  asymptotic_instance  -- coarse lattice with positions at cell midpoints,
                          diffusion-dominated drifts, no 30-day legs.  The
                          h -> 0 criteria compare against genuine o(sqrt(h))
                          residuals (theta over the VaR scale), so the family
                          has to stay inside the regime the limit theorems
                          assume: surfaces differentiable at the positions and
                          a visible diffusion scale.
"""
import numpy as np

from optmargin import bs
from optmargin.affine import AffineModel, CorrBlocks, Dynamics, closed_var, pnl_coeffs
from optmargin.marketdata import TermStructure
from optmargin.portfolio import Portfolio, Position

LATTICE_TAUS = np.array([5, 21, 63, 126, 252, 400]) / 365.0


def _surfaces(rng, ks, d):
    a0 = rng.uniform(0.15, 0.3)
    a1 = rng.uniform(-0.15, 0.05)
    a2 = rng.uniform(0.0, 0.4)
    g0 = np.empty((len(LATTICE_TAUS), len(ks)))
    vega_n = np.empty_like(g0)
    for j, tau in enumerate(LATTICE_TAUS):
        sig = np.clip(a0 + a1 * ks + a2 * ks * ks, 0.08, 0.6)
        g0[j] = bs.price_kernel(ks, tau, +1, 1.0, 1.0, sig)
        st = sig * np.sqrt(tau)
        d1 = -ks / st + 0.5 * st
        vega_n[j] = bs.norm_pdf(d1) * np.sqrt(tau)
    shapes = [vega_n * rng.uniform(0.5, 1.0),
              vega_n * ks[None, :] * rng.uniform(1.0, 3.0)]
    return g0, np.stack(shapes[:d], axis=-1)


def _correlations(rng, d):
    while True:
        p = rng.uniform(-0.7, 0.7, size=d)
        p_xi = np.eye(d)
        if d == 2:
            p_xi[0, 1] = p_xi[1, 0] = rng.uniform(-0.6, 0.6)
        if np.linalg.eigvalsh(p_xi - np.outer(p, p)).min() > 1e-6:
            return CorrBlocks(p, p_xi)


def _model(rng, ks, d, dyn):
    g0, g = _surfaces(rng, ks, d)
    xi_t = rng.normal(0.0, 0.02, size=d)
    xi_hist = np.vstack([xi_t + rng.normal(0, 1e-3, size=(49, d)), xi_t[None, :]])
    spot = float(rng.uniform(50, 200))
    return AffineModel(LATTICE_TAUS,
                       np.broadcast_to(ks, (len(LATTICE_TAUS), len(ks))).copy(),
                       g0, g, xi_hist, dyn, _correlations(rng, d),
                       TermStructure.flat(spot))


def _positions(rng, spot, n_pos, k_choices, tau_days):
    out = []
    for _ in range(n_pos):
        k = float(rng.choice(k_choices)) if np.ndim(k_choices) else float(k_choices)
        tau = float(rng.choice(tau_days)) / 365.0
        out.append(Position(float(rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])),
                            int(rng.choice([-1, 1])), spot * np.exp(k), tau))
    return Portfolio(tuple(out))


def random_instance(rng, d=None, n_pos=None):
    d = int(rng.integers(1, 3)) if d is None else d
    n_pos = int(rng.integers(1, 5)) if n_pos is None else n_pos
    ks = np.linspace(-0.5, 0.5, 81)
    dyn = Dynamics(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(0.08, 0.35)),
                   rng.normal(0.0, 0.05, size=d),
                   np.diag(rng.uniform(0.1, 0.6, size=d)))
    model = _model(rng, ks, d, dyn)
    pf = _positions(rng, model.term.spot, n_pos,
                    rng.uniform(-0.3, 0.3, size=64), (30, 60, 91, 150, 240))
    return model, pf


def asymptotic_instance(rng, d=None, n_pos=None):
    d = int(rng.integers(1, 3)) if d is None else d
    n_pos = int(rng.integers(1, 5)) if n_pos is None else n_pos
    ks = np.linspace(-0.55, 0.55, 12)
    dyn = Dynamics(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(0.15, 0.3)),
                   rng.normal(0.0, 0.01, size=d),
                   np.diag(rng.uniform(0.1, 0.5, size=d)))
    model = _model(rng, ks, d, dyn)
    mids = 0.5 * (ks[:-1] + ks[1:])
    # condition on diffusion-dominated portfolios: the deterministic decay over
    # the Cauchy horizon must be well below the VaR scale, otherwise the
    # genuine O(h) terms (not any approximation error) dominate the criteria
    h_ref = 1e-3
    for _ in range(200):
        pf = _positions(rng, model.term.spot, n_pos, mids[2:-2], (91, 150, 240))
        coeffs = pnl_coeffs(model, pf)
        s_drift = np.asarray(coeffs.s_t * np.exp(dyn.alpha * h_ref))
        decay = abs(float(coeffs.a(h_ref, s_drift)))
        if decay <= 0.004 * abs(closed_var(model, pf, 0.99, h_ref)):
            break
    return model, pf
