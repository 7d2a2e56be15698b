"""Affine factor model for normalized call prices and its VaR formulas."""
from .model import (AffineModel, CalibrationResult, CorrBlocks, Dynamics,
                    build_model_from_history, calibrate_factors, estimate_dynamics,
                    load_model, price_surface, save_model)
from .var import (PnlCoeffs, closed_var, closed_var_d1, conditional_moments,
                  empirical_var, pnl_coeffs, quasi_explicit_var)

__all__ = [
    "AffineModel", "CalibrationResult", "CorrBlocks", "Dynamics",
    "build_model_from_history", "calibrate_factors", "estimate_dynamics",
    "load_model", "price_surface", "save_model",
    "PnlCoeffs", "closed_var", "closed_var_d1", "conditional_moments",
    "empirical_var", "pnl_coeffs", "quasi_explicit_var",
]
