"""Initial-margin VaR engines for option portfolios.

Four interoperable method families: the closed short-term formulas (Gaussian
and t-Student), filtered historical simulation with full revaluation, the
first-order stochastic-volatility formula on a Heston laboratory, and the
affine factor model for normalized call prices with quasi-explicit, closed and
Monte-Carlo VaR.  A backtesting harness measures coverage, size-of-loss and
procyclicality, and the margin-stack helpers combine the pieces into a total
risk requirement.
"""
from . import affine, backtest, bs, estimators, fhs, heston, labdata, marketdata
from .portfolio import Portfolio, Position
from .shortterm import (ExposureCoeffs, ShortTermParams, exposure_coeffs,
                        gaussian_var, sample_Z, tstudent_var)

__version__ = "0.1.0"

__all__ = [
    "affine", "backtest", "bs", "estimators", "fhs", "heston", "labdata",
    "marketdata", "Portfolio", "Position", "ExposureCoeffs", "ShortTermParams",
    "exposure_coeffs", "gaussian_var", "sample_Z", "tstudent_var", "__version__",
]
