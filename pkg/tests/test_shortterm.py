"""Closed short-term VaR: exposure collapse, Gaussian and t-Student variants."""
import numpy as np
import pytest
from scipy.stats import kstest, t as student_t

from optmargin import bs
from optmargin.marketdata import SurfaceGrid, TermStructure
from optmargin.portfolio import Portfolio, Position
from optmargin.shortterm import (DegenerateCoefficientsError, ExposureCoeffs,
                                 ShortTermParams, ZQuantileTable, exposure_coeffs,
                                 gaussian_var, sample_Z, tstudent_var)

Z01 = -2.3263478740408408


def params(beta=0.2, rho=0.0, theta=0.99, h=1.0, zeta=0.5, nu=None):
    return ShortTermParams(beta=beta, rho=rho, theta=theta, h=h,
                           zeta_of=lambda k, tau: zeta, nu=nu)


def flat_grid(spot=100.0, vol=0.2):
    taus = np.array([0.25, 2.0])
    kcol = np.linspace(-1.0, 1.0, 9)
    vols = np.full((2, 9), vol)
    return SurfaceGrid(taus, np.vstack([kcol, kcol]), vols,
                       TermStructure.flat(spot))


def atm_call(tau=1.0):
    return Portfolio((Position(1.0, 1, 100.0, tau),))


class TestExposure:
    def test_zero_beta_kills_c(self):
        co = exposure_coeffs(atm_call(), 100.0, flat_grid(), params(beta=0.0))
        assert co.c == 0.0

    def test_zero_zeta_kills_q(self):
        co = exposure_coeffs(atm_call(), 100.0, flat_grid(), params(zeta=0.0))
        assert co.q == 0.0

    def test_atm_one_year_frozen_values(self):
        # delta = 0.53983, vega = 39.695 at sigma = 0.2, flat smile
        co = exposure_coeffs(atm_call(), 100.0, flat_grid(), params())
        assert co.c == pytest.approx(0.2 * 100.0 * 0.53983, abs=2e-3)
        assert co.q == pytest.approx(0.5 * 39.695, abs=2e-2)

    def test_spot_position_enters_delta_channel(self):
        pf = Portfolio((), spot_quantity=2.0)
        co = exposure_coeffs(pf, 100.0, flat_grid(), params())
        assert co.c == pytest.approx(0.2 * 100.0 * 2.0, rel=1e-12)
        assert co.q == 0.0


class TestGaussianVar:
    def test_zero_coeffs(self):
        assert gaussian_var(ExposureCoeffs(0.0, 0.0), params()) == 0.0

    def test_three_four_five(self):
        got = gaussian_var(ExposureCoeffs(3.0, 4.0), params(rho=0.0))
        assert got == pytest.approx(Z01 * 5.0, abs=1e-3)
        assert got == pytest.approx(-11.6317, abs=1e-3)

    def test_perfect_hedge(self):
        got = gaussian_var(ExposureCoeffs(1.0, 1.0), params(rho=-1.0))
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_sqrt_h_scaling_exact(self):
        co = ExposureCoeffs(2.0, 1.5)
        v1 = gaussian_var(co, params(rho=-0.4, h=0.01))
        v4 = gaussian_var(co, params(rho=-0.4, h=0.04))
        assert v4 == 2.0 * v1

    def test_sign_symmetry_exact(self):
        co = ExposureCoeffs(2.0, -1.5)
        flipped = ExposureCoeffs(-2.0, 1.5)
        p = params(rho=-0.6)
        assert gaussian_var(co, p) == gaussian_var(flipped, p)

    def test_monotone_in_theta(self):
        co = ExposureCoeffs(2.0, 1.0)
        vals = [abs(gaussian_var(co, params(theta=th))) for th in
                (0.95, 0.975, 0.99, 0.995)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))


class TestSampleZ:
    def test_q_zero_reduces_to_student(self):
        z = sample_Z(1.0, 0.0, 0.0, 5.0, 100_000, seed=1)
        assert np.mean(z) == pytest.approx(0.0, abs=3 * np.sqrt(5 / 3) / np.sqrt(1e5))
        assert np.var(z) == pytest.approx(5.0 / 3.0, rel=0.05)

    def test_c_zero_rho_zero_is_normal(self):
        z = sample_Z(0.0, 2.0, 0.0, 5.0, 50_000, seed=2)
        stat = kstest(z, "norm").statistic
        assert stat < 1.63 / np.sqrt(len(z))   # 1% KS level

    def test_large_nu_gaussian_limit(self):
        z = sample_Z(1.0, 1.0, -0.3, 1e6, 200_000, seed=3)
        q = np.quantile(z, 0.01)
        assert q == pytest.approx(Z01, abs=0.02)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateCoefficientsError):
            sample_Z(1.0, 1.0, -1.0, 5.0, 100, seed=0)

    def test_worker_invariance(self):
        a = sample_Z(1.0, 2.0, -0.5, 7.0, 40_000, seed=9, n_workers=1)
        b = sample_Z(1.0, 2.0, -0.5, 7.0, 40_000, seed=9, n_workers=4)
        assert np.array_equal(a, b)


class TestTStudentVar:
    def test_q_zero_matches_t_quantile(self):
        got = tstudent_var(ExposureCoeffs(1.0, 0.0), params(nu=5.0), seed=4)
        assert got == pytest.approx(student_t.ppf(0.01, 5.0), abs=0.05)
        assert got == pytest.approx(-3.3649, abs=0.05)

    def test_c_zero_rho_zero_matches_gaussian(self):
        p = params(nu=5.0)
        got = tstudent_var(ExposureCoeffs(0.0, 2.0), p, seed=5)
        want = gaussian_var(ExposureCoeffs(0.0, 2.0), p)
        assert got == pytest.approx(want, rel=0.02)

    def test_fatter_tail_than_gaussian(self):
        rng = np.random.default_rng(6)
        for seed in range(5):
            c, q = rng.uniform(0.5, 3.0, size=2)
            rho = rng.uniform(-0.8, 0.8)
            p = params(rho=rho, nu=5.0)
            co = ExposureCoeffs(float(c), float(q))
            assert tstudent_var(co, p, seed=seed) <= gaussian_var(co, p)

    def test_sqrt_h_exact_same_seed(self):
        co = ExposureCoeffs(2.0, 1.0)
        v1 = tstudent_var(co, params(rho=0.2, h=0.01, nu=5.0), seed=7)
        v4 = tstudent_var(co, params(rho=0.2, h=0.04, nu=5.0), seed=7)
        assert v4 == pytest.approx(2.0 * v1, rel=1e-15)

    def test_sign_symmetry_exact(self):
        p = params(rho=-0.5, nu=5.0)
        a = tstudent_var(ExposureCoeffs(2.0, 1.0), p, seed=8)
        b = tstudent_var(ExposureCoeffs(-2.0, -1.0), p, seed=8)
        assert a == b

    def test_degenerate_returns_zero(self):
        assert tstudent_var(ExposureCoeffs(1.0, 1.0), params(rho=-1.0, nu=5.0),
                            seed=0) == 0.0


def test_z_table_tracks_sampling():
    table = ZQuantileTable(5.0, 0.99, n=200_000, seed=11)
    for c, q, rho in ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (2.0, 1.0, -0.5)):
        direct = np.quantile(sample_Z(c, q, rho, 5.0, 200_000, seed=12), 0.01)
        assert table.quantile(c, q, rho) == pytest.approx(direct, abs=0.05)
