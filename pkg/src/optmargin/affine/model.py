"""Affine factor model c(tau, k) = G0(tau, k) + G(tau, k) . xi.

Calibration follows the statistical route: G0 is the columnwise mean of the
normalized-price history, the G_i are the leading principal components of the
residuals, and the xi are the residual projections.  Factor dynamics are
estimated by moment matching on the one-step Euler scheme

    S_{t+h}  = S_t exp((alpha - beta^2/2) h + beta dW0)
    xi_{t+h} = xi_t + mu h + sigma . dW

with (dW0, dW) jointly N(0, h P) and P the (1+d) correlation matrix split into
the spot/factor block p_s_xi and the factor block p_xi.

Off-lattice surface values come in two flavours, recorded on the model:
  - "lattice": linear interpolation of the G surfaces in k and tau (the
    natural choice when the surfaces are known directly);
  - "regression": interpolate each day's prices at the target point (linear
    implied vol in k, linear total variance in tau), then regress the series
    on the factor history; the intercept and slopes are the off-lattice G.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .. import bs
from ..estimators import EwmaConfig, ewma_vol
from ..marketdata import TermStructure


class RankDeficientError(ValueError):
    """Requested more factors than the residual history supports."""


def sym_sqrt_psd(mat, warn_label=None, clip_tol=1e-10):
    """Symmetric PSD square root; negative eigenvalues are clipped at zero."""
    mat = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(mat)
    if warn_label and w.size and w.min() < -clip_tol * max(1.0, abs(w.max())):
        warnings.warn(f"{warn_label} is not PSD (min eigenvalue {w.min():.3g}); "
                      "clipping at zero", stacklevel=3)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def nearest_psd_corr(corr, max_iter=50, tol=1e-12):
    """Project a symmetric matrix to the nearest PSD matrix with unit diagonal."""
    x = 0.5 * (corr + corr.T)
    for _ in range(max_iter):
        w, v = np.linalg.eigh(x)
        if w.min() >= -tol:
            break
        x = (v * np.clip(w, 0.0, None)) @ v.T
        d = np.sqrt(np.clip(np.diag(x), 1e-16, None))
        x = x / np.outer(d, d)
    np.fill_diagonal(x, 1.0)
    return x


@dataclass(frozen=True)
class Dynamics:
    alpha: float
    beta: float
    mu: np.ndarray       # (d,)
    sigma: np.ndarray    # (d, d)


@dataclass(frozen=True)
class CorrBlocks:
    p_s_xi: np.ndarray   # (d,)
    p_xi: np.ndarray     # (d, d)

    def full(self) -> np.ndarray:
        d = self.p_s_xi.shape[0]
        out = np.empty((1 + d, 1 + d))
        out[0, 0] = 1.0
        out[0, 1:] = self.p_s_xi
        out[1:, 0] = self.p_s_xi
        out[1:, 1:] = self.p_xi
        return out


@dataclass
class AffineModel:
    taus: np.ndarray             # (nt,) pillar years
    k_columns: np.ndarray        # (nt, nk)
    g0: np.ndarray               # (nt, nk)
    g: np.ndarray                # (nt, nk, d)
    xi_history: np.ndarray       # (n, d)
    dyn: Dynamics
    corr: CorrBlocks
    term: TermStructure
    interp: str = "lattice"
    price_history: np.ndarray | None = None   # (n, nt, nk), regression mode only

    def __post_init__(self):
        if self.interp not in ("lattice", "regression"):
            raise ValueError("interp must be 'lattice' or 'regression'")
        if self.interp == "regression" and self.price_history is None:
            raise ValueError("regression interpolation needs the price history")
        self._iv_history = None
        self._reg_cache = {}

    @property
    def d(self) -> int:
        return self.g.shape[2]

    @property
    def xi_t(self) -> np.ndarray:
        return self.xi_history[-1]

    # ------------------------------------------------------------ interpolation

    def _tau_bracket(self, tau):
        taus = self.taus
        if tau < taus[0] - 1e-12 or tau > taus[-1] + 1e-12:
            warnings.warn(f"tau={tau:.6g} outside the lattice hull; flat extension",
                          stacklevel=3)
        if tau <= taus[0]:
            return 0, 0, 0.0
        if tau >= taus[-1]:
            j = len(taus) - 1
            return j, j, 0.0
        j = int(np.searchsorted(taus, tau, side="right")) - 1
        lam = (tau - taus[j]) / (taus[j + 1] - taus[j])
        return j, j + 1, lam

    def k_breakpoints(self, tau, refine: int = 1) -> np.ndarray:
        """Breakpoints of the k-interpolant at tau (union of bracketing slices)."""
        ja, jb, _ = self._tau_bracket(tau)
        pts = np.union1d(self.k_columns[ja], self.k_columns[jb])
        if refine > 1:
            fine = [np.linspace(pts[i], pts[i + 1], refine + 1)[:-1]
                    for i in range(len(pts) - 1)]
            pts = np.concatenate(fine + [pts[-1:]])
        return pts

    def surface_values(self, tau, ks):
        """(g0_vals, g_vals) at (tau, ks): shapes (m,) and (m, d)."""
        ks = np.asarray(ks, dtype=float)
        if self.interp == "lattice":
            return self._lattice_values(tau, ks)
        return self._regression_values(tau, ks)

    def _lattice_values(self, tau, ks):
        ja, jb, lam = self._tau_bracket(tau)
        ka, kb = self.k_columns[ja], self.k_columns[jb]
        if np.any(ks < min(ka[0], kb[0]) - 1e-12) or np.any(ks > max(ka[-1], kb[-1]) + 1e-12):
            warnings.warn("k outside the lattice hull; flat extension", stacklevel=3)
        g0a = np.interp(ks, ka, self.g0[ja])
        g0b = np.interp(ks, kb, self.g0[jb])
        g0v = (1.0 - lam) * g0a + lam * g0b
        d = self.d
        gv = np.empty(ks.shape + (d,))
        for i in range(d):
            ga = np.interp(ks, ka, self.g[ja, :, i])
            gb = np.interp(ks, kb, self.g[jb, :, i])
            gv[..., i] = (1.0 - lam) * ga + lam * gb
        return g0v, gv

    def _day_vols(self):
        """Implied vols of the normalized price history at every lattice node."""
        if self._iv_history is None:
            n, nt, nk = self.price_history.shape
            vols = np.empty_like(self.price_history)
            for j in range(nt):
                tau = self.taus[j]
                kc = self.k_columns[j]
                lo = np.maximum(1.0 - np.exp(kc), 0.0)
                clamped = np.clip(self.price_history[:, j, :], lo + 1e-12, 1.0 - 1e-12)
                vols[:, j, :] = bs.implied_vol_vec(
                    clamped, np.broadcast_to(kc, (n, nk)), tau, +1, 1.0, 1.0,
                    price_tol=1e-14)
            self._iv_history = vols
        return self._iv_history

    def _regression_values(self, tau, ks):
        key = (round(float(tau), 12), ks.tobytes())
        if key in self._reg_cache:
            return self._reg_cache[key]
        ja, jb, lam = self._tau_bracket(tau)
        if ja == jb or lam == 0.0:
            # exact lattice hits regress the raw prices: no implied-vol round
            # trip, and histories that graze the price bounds stay representable
            idx = np.searchsorted(self.k_columns[ja], ks)
            idx = np.clip(idx, 0, self.k_columns[ja].shape[0] - 1)
            if np.allclose(self.k_columns[ja][idx], ks, rtol=0, atol=1e-12):
                y = self.price_history[:, ja, :][:, idx]
                design = np.column_stack([np.ones(y.shape[0]), self.xi_history])
                coef, *_ = np.linalg.lstsq(design, y, rcond=None)
                out = (coef[0].copy(), coef[1:].T.copy())
                self._reg_cache[key] = out
                return out
        vols = self._day_vols()
        n = vols.shape[0]
        siga = np.vstack([np.interp(ks, self.k_columns[ja], vols[i, ja]) for i in range(n)])
        if ja == jb:
            sig = siga
        else:
            sigb = np.vstack([np.interp(ks, self.k_columns[jb], vols[i, jb]) for i in range(n)])
            wa = siga ** 2 * self.taus[ja]
            wb = sigb ** 2 * self.taus[jb]
            sig = np.sqrt(((1.0 - lam) * wa + lam * wb) / tau)
        prices = bs.price_kernel(ks[None, :], tau, +1, 1.0, 1.0, sig)
        design = np.column_stack([np.ones(n), self.xi_history])
        coef, *_ = np.linalg.lstsq(design, prices, rcond=None)
        out = (coef[0].copy(), coef[1:].T.copy())
        self._reg_cache[key] = out
        return out

    def reconstruct_history(self) -> np.ndarray:
        """(n, nt, nk) prices implied by g0 + g . xi over the factor history."""
        n = self.xi_history.shape[0]
        flat_g = self.g.reshape(-1, self.d)
        recon = self.g0.reshape(-1)[None, :] + self.xi_history @ flat_g.T
        return recon.reshape((n,) + self.g0.shape)


def price_surface(model: AffineModel, xi, tau, k) -> float:
    """Normalized call price at (tau, k) for factor values xi; affine in xi."""
    g0v, gv = model.surface_values(tau, np.atleast_1d(float(k)))
    return float(g0v[0] + gv[0] @ np.asarray(xi, dtype=float))


@dataclass(frozen=True)
class CalibrationResult:
    g0: np.ndarray
    g: np.ndarray            # (m, d) principal directions, unit norm
    xi_history: np.ndarray   # (n, d)
    mape: float


def calibrate_factors(price_history, d: int) -> CalibrationResult:
    """Mean surface plus d principal components of the residuals.

    price_history is (n_days, n_nodes).  Component signs are fixed by making
    the first non-negligible entry positive; xi rows are the residual
    projections on the (orthonormal) components.
    """
    prices = np.asarray(price_history, dtype=float)
    if prices.ndim != 2:
        raise ValueError("price history must be 2-d (days x nodes)")
    n, m = prices.shape
    if n <= d:
        raise RankDeficientError(f"history of {n} days cannot support d={d}")
    g0 = prices.mean(axis=0)
    resid = prices - g0
    if d == 0:
        g = np.empty((m, 0))
        xi = np.empty((n, 0))
    else:
        u, s, vt = np.linalg.svd(resid, full_matrices=False)
        rank = int(np.sum(s > max(s[0], 1e-300) * 1e-12)) if s.size else 0
        if d > rank:
            raise RankDeficientError(f"residual rank {rank} < requested d={d}")
        g = vt[:d].T.copy()
        for i in range(d):
            lead = np.nonzero(np.abs(g[:, i]) > 1e-12)[0]
            if lead.size and g[lead[0], i] < 0:
                g[:, i] = -g[:, i]
        xi = resid @ g
    recon = g0[None, :] + xi @ g.T
    mask = np.abs(prices) > 1e-6
    mape = float(np.mean(np.abs(recon - prices)[mask] / np.abs(prices)[mask])) \
        if mask.any() else float(np.mean(np.abs(recon - prices)))
    return CalibrationResult(g0, g, xi, mape)


def estimate_dynamics(spot_history, xi_history, h_r: float,
                      corr_mode: str = "sample", ewma_lambda: float = 0.97):
    """Moment estimators for the factor dynamics.

    alpha and beta come from the mean and EWMA vol of spot log returns, mu and
    sigma from the factor increments.  corr_mode "sample" takes sigma diagonal
    (per-factor increment vols) and the correlation blocks from sample
    correlations; "identity" fixes P = I and absorbs the increment covariance
    into sigma through its symmetric square root, which is the configuration
    used in the experiments.
    """
    spot = np.asarray(spot_history, dtype=float)
    xi = np.asarray(xi_history, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if spot.shape[0] != xi.shape[0]:
        raise ValueError("spot and factor histories must be aligned")
    if spot.shape[0] < 31:
        warnings.warn("fewer than 30 increments; dynamics estimates will be noisy",
                      stacklevel=2)
    r = np.diff(np.log(spot))
    dxi = np.diff(xi, axis=0)
    d = xi.shape[1]

    beta = float(ewma_vol(r, EwmaConfig(lam=ewma_lambda, convention="current",
                                        step=h_r))[-1])
    alpha = float(np.mean(r) / h_r + 0.5 * beta * beta)
    mu = dxi.mean(axis=0) / h_r

    if d == 0:
        dyn = Dynamics(alpha, beta, np.empty(0), np.empty((0, 0)))
        return dyn, CorrBlocks(np.empty(0), np.empty((0, 0)))

    cov = np.atleast_2d(np.cov(dxi.T, ddof=1)) / h_r
    stds = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    dead = stds <= 1e-300
    if np.any(dead):
        warnings.warn("constant factor increment(s); the corresponding sigma rows "
                      "and correlations are zero", stacklevel=2)

    if corr_mode == "identity":
        sigma = sym_sqrt_psd(cov, warn_label="increment covariance")
        corr = CorrBlocks(np.zeros(d), np.eye(d))
    elif corr_mode == "sample":
        sigma = np.diag(stds)
        denom = np.outer(stds, stds)
        with np.errstate(invalid="ignore", divide="ignore"):
            p_xi = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
        np.fill_diagonal(p_xi, 1.0)
        sd_r = np.std(r, ddof=1)
        p_s = np.zeros(d)
        if sd_r > 0:
            for i in range(d):
                if not dead[i]:
                    p_s[i] = np.corrcoef(r, dxi[:, i])[0, 1]
        full = nearest_psd_corr(np.block([[np.ones((1, 1)), p_s[None, :]],
                                          [p_s[:, None], p_xi]]))
        corr = CorrBlocks(full[0, 1:].copy(), full[1:, 1:].copy())
    else:
        raise ValueError("corr_mode must be 'sample' or 'identity'")
    return Dynamics(alpha, beta, mu, sigma), corr


def build_model_from_history(price_history, taus, k_columns, spot_history, h_r: float,
                             d: int, term: TermStructure, corr_mode: str = "sample",
                             interp: str = "regression") -> AffineModel:
    """Calibrate factors and dynamics from a (days x nt x nk) price history."""
    prices = np.asarray(price_history, dtype=float)
    n, nt, nk = prices.shape
    calib = calibrate_factors(prices.reshape(n, nt * nk), d)
    dyn, corr = estimate_dynamics(spot_history, calib.xi_history, h_r, corr_mode)
    return AffineModel(
        taus=np.asarray(taus, dtype=float),
        k_columns=np.asarray(k_columns, dtype=float),
        g0=calib.g0.reshape(nt, nk),
        g=calib.g.reshape(nt, nk, d),
        xi_history=calib.xi_history,
        dyn=dyn, corr=corr, term=term, interp=interp,
        price_history=prices if interp == "regression" else None)


# ------------------------------------------------------------- serialization

MODEL_MAGIC = "optmargin-affine-v1"


def _fmt(arr):
    return " ".join(repr(float(x)) for x in np.asarray(arr, dtype=float).ravel())


def save_model(model: AffineModel, path):
    """Versioned flat-text model file; floats as shortest round-trip decimals."""
    nt, nk = model.g0.shape
    n = model.xi_history.shape[0]
    lines = [MODEL_MAGIC,
             f"interp {model.interp}",
             f"dims {nt} {nk} {model.d} {n}",
             "taus " + _fmt(model.taus)]
    for j in range(nt):
        lines.append("k_columns " + _fmt(model.k_columns[j]))
    for j in range(nt):
        lines.append("g0 " + _fmt(model.g0[j]))
    for i in range(model.d):
        for j in range(nt):
            lines.append(f"g{i} " + _fmt(model.g[j, :, i]))
    for row in model.xi_history:
        lines.append("xi " + _fmt(row))
    lines.append("alpha " + repr(float(model.dyn.alpha)))
    lines.append("beta " + repr(float(model.dyn.beta)))
    lines.append("mu " + _fmt(model.dyn.mu))
    for i in range(model.d):
        lines.append("sigma " + _fmt(model.dyn.sigma[i]))
    lines.append("p_s_xi " + _fmt(model.corr.p_s_xi))
    for i in range(model.d):
        lines.append("p_xi " + _fmt(model.corr.p_xi[i]))
    lines.append("spot " + repr(float(model.term.spot)))
    lines.append("term_taus " + _fmt(model.term.taus))
    lines.append("term_discounts " + _fmt(model.term.discounts))
    lines.append("term_forwards " + _fmt(model.term.forwards))
    if model.price_history is not None:
        lines.append("has_price_history 1")
        for i in range(n):
            for j in range(nt):
                lines.append("price " + _fmt(model.price_history[i, j]))
    else:
        lines.append("has_price_history 0")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path) -> AffineModel:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if lines[0] != MODEL_MAGIC:
        raise ValueError(f"not a model file (magic {lines[0]!r})")
    it = iter(lines[1:])

    def take(prefix):
        line = next(it)
        if not line.startswith(prefix + " "):
            raise ValueError(f"expected {prefix!r}, got {line[:40]!r}")
        return line[len(prefix) + 1:]

    def floats(text):
        return np.array([float(tok) for tok in text.split()])

    interp = take("interp")
    nt, nk, d, n = (int(tok) for tok in take("dims").split())
    taus = floats(take("taus"))
    k_columns = np.vstack([floats(take("k_columns")) for _ in range(nt)])
    g0 = np.vstack([floats(take("g0")) for _ in range(nt)])
    g = np.empty((nt, nk, d))
    for i in range(d):
        for j in range(nt):
            g[j, :, i] = floats(take(f"g{i}"))
    xi = np.vstack([floats(take("xi")) for _ in range(n)]) if n else np.empty((0, d))
    alpha = float(take("alpha"))
    beta = float(take("beta"))
    mu = floats(take("mu"))
    sigma = np.vstack([floats(take("sigma")) for _ in range(d)]) if d else np.empty((0, 0))
    p_s_xi = floats(take("p_s_xi"))
    p_xi = np.vstack([floats(take("p_xi")) for _ in range(d)]) if d else np.empty((0, 0))
    spot = float(take("spot"))
    term = TermStructure(floats(take("term_taus")), floats(take("term_discounts")),
                         floats(take("term_forwards")), spot)
    has_ph = int(take("has_price_history"))
    price_history = None
    if has_ph:
        rows = [floats(take("price")) for _ in range(n * nt)]
        price_history = np.vstack(rows).reshape(n, nt, nk)
    return AffineModel(taus, k_columns, g0, g, xi.reshape(n, d), Dynamics(alpha, beta, mu, sigma),
                       CorrBlocks(p_s_xi, p_xi), term, interp, price_history)
