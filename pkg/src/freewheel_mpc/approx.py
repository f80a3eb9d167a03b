"""Taylor expansions of the inverse speed sqrt(m/2) * K^(-1/2) around a reference K_r."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TaylorCoeffs:
    theta0: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray
    varphi0: np.ndarray

    def second_order(self, K):
        return self.theta0 + self.theta1 * K + self.theta2 * K * K

    def first_order(self, K):
        return self.phi0 + self.phi1 * K

    def zeroth_order(self, K=None):
        return self.varphi0


def taylor_coeffs(K_r, m: float) -> TaylorCoeffs:
    """Coefficients of the 2nd/1st/0th order expansions of 1/v in K, per step."""
    K_r = np.atleast_1d(np.asarray(K_r, dtype=float))
    if np.any(~(K_r > 0)):
        raise ValueError("reference kinetic energy must be > 0 at every step")
    c = np.sqrt(m / 2.0)
    r1 = K_r**-0.5
    r3 = r1 / K_r
    r5 = r3 / K_r
    return TaylorCoeffs(
        theta0=15 / 8 * c * r1,
        theta1=-10 / 8 * c * r3,
        theta2=3 / 8 * c * r5,
        phi0=3 / 2 * c * r1,
        phi1=-1 / 2 * c * r3,
        varphi0=c * r1,
    )
