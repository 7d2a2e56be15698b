"""Option portfolios: signed positions plus an optional underlying holding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Position:
    quantity: float
    omega: int        # +1 call, -1 put
    strike: float
    tau: float        # years to expiry at the valuation date

    def __post_init__(self):
        if self.omega not in (+1, -1):
            raise ValueError("omega must be +1 or -1")
        if self.strike <= 0 or self.tau <= 0:
            raise ValueError("need strike > 0 and tau > 0")


@dataclass(frozen=True)
class Portfolio:
    positions: tuple[Position, ...] = ()
    spot_quantity: float = 0.0
    cash: float = 0.0

    def __iter__(self):
        return iter(self.positions)

    def __len__(self):
        return len(self.positions)

    def scaled(self, factor: float) -> "Portfolio":
        return Portfolio(
            tuple(Position(p.quantity * factor, p.omega, p.strike, p.tau)
                  for p in self.positions),
            self.spot_quantity * factor, self.cash * factor)

    def arrays(self):
        """(quantity, omega, strike, tau) arrays for vectorized revaluation."""
        if not self.positions:
            z = np.empty(0)
            return z, z.astype(int), z, z
        q = np.array([p.quantity for p in self.positions])
        w = np.array([p.omega for p in self.positions])
        K = np.array([p.strike for p in self.positions])
        t = np.array([p.tau for p in self.positions])
        return q, w, K, t
