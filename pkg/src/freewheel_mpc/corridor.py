"""Velocity corridor: lower/upper speed bounds around a piecewise-constant reference.

Deceleration ramps use fitted fleet statistics (mean and standard deviation
of the deceleration when slowing from v1 to v2); acceleration ramps use
fixed accelerations. The lower bound is afterwards repaired so that a
vehicle at full tractive power can always stay above it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cycle import DrivingCycle
from .vehicle import (
    ControlInput,
    EngineParams,
    KineticState,
    VehicleParams,
    VehicleStopped,
    plant_step,
)

KMH = 1 / 3.6
SIGMA_FLOOR = 0.01  # m/s^2
DECEL_FLOOR = 0.05  # m/s^2, keeps the shallow ramp finite


class CorridorCollapse(ValueError):
    pass


@dataclass(frozen=True)
class CorridorSettings:
    delta_v: float  # m/s
    n_sigma: float
    a_l: float  # m/s^2
    a_u: float  # m/s^2

    def __post_init__(self):
        if self.delta_v < 0 or self.n_sigma < 0:
            raise ValueError("delta_v and n_sigma must be non-negative")
        if not 0 < self.a_l < self.a_u:
            raise ValueError(f"need 0 < a_l < a_u, got a_l={self.a_l}, a_u={self.a_u}")


BENCHMARK = CorridorSettings(delta_v=1 * KMH, n_sigma=0.5, a_l=0.3, a_u=0.4)
WIDE = CorridorSettings(delta_v=4 * KMH, n_sigma=1.0, a_l=0.25, a_u=0.6)


@dataclass(frozen=True, eq=False)
class VelocityCorridor:
    s: np.ndarray
    v_l: np.ndarray
    v_u: np.ndarray
    m: float

    def __post_init__(self):
        if np.any(self.v_l <= 0):
            raise CorridorCollapse("lower bound must stay positive")
        bad = np.flatnonzero(self.v_l > self.v_u)
        if len(bad):
            raise CorridorCollapse(f"v_l > v_u at s={self.s[bad[0]]:.1f} m")

    @property
    def K_l(self) -> np.ndarray:
        return 0.5 * self.m * self.v_l**2

    @property
    def K_u(self) -> np.ndarray:
        return 0.5 * self.m * self.v_u**2

    def __len__(self):
        return len(self.s)

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s_m", "v_l_mps", "v_u_mps"])
            for row in zip(self.s, self.v_l, self.v_u):
                w.writerow([repr(float(x)) for x in row])


def mean_decel(v1, v2):
    """Mean fleet deceleration (m/s^2) when slowing from v1 to v2 (m/s)."""
    return (0.366 + 0.0771 * v1 - 0.0849 * v2
            - 0.00185 * v1**2 + 0.00348 * v1 * v2 - 0.00214 * v2**2)


def std_decel(v1, v2):
    """Standard deviation (m/s^2) of the same deceleration statistic."""
    return (0.187 + 0.0250 * v1 - 0.0327 * v2
            - 0.000734 * v1**2 + 0.00187 * v1 * v2 - 0.00101 * v2**2)


def _ramp(v0, a, dist):
    # speed after covering `dist` from v0 with constant acceleration a (v dv/ds = a)
    return np.sqrt(np.maximum(v0 * v0 + 2.0 * a * dist, 0.0))


def build_corridor(c: DrivingCycle, settings: CorridorSettings, p: VehicleParams) -> VelocityCorridor:
    """Corridor from the reference speed, before the feasibility repair.

    On constant stretches the bounds are v_ref -/+ delta_v. Before a reference
    drop v1 -> v2 at position s_e, the upper bound ramps down with the steep
    deceleration (mean + n_sigma*std) and the lower bound with the shallow one
    (mean - n_sigma*std); both reach their new level at s_e, so the lower bound
    leaves its level first and the corridor opens during the manoeuvre. After
    a reference rise at s_e both bounds climb from their old level with a_l
    (lower) and a_u (upper).
    """
    s = c.s
    dv = settings.delta_v
    v_l = c.v_ref - dv
    v_u = c.v_ref + dv
    for i in np.flatnonzero(np.diff(c.v_ref) != 0) + 1:
        v1, v2 = c.v_ref[i - 1], c.v_ref[i]
        s_e = s[i]
        if v2 < v1:
            mu = mean_decel(v1, v2)
            sig = max(std_decel(v1, v2), SIGMA_FLOOR)
            d_lo = max(mu - settings.n_sigma * sig, DECEL_FLOOR)
            d_hi = max(mu + settings.n_sigma * sig, DECEL_FLOOR)
            before = slice(0, i)
            dist = s_e - s[before]
            v_l[before] = np.minimum(v_l[before], _ramp(v2 - dv, d_lo, dist))
            v_u[before] = np.minimum(v_u[before], _ramp(v2 + dv, d_hi, dist))
        else:
            after = slice(i, None)
            dist = s[after] - s_e
            v_l[after] = np.minimum(v_l[after], _ramp(v1 - dv, settings.a_l, dist))
            v_u[after] = np.minimum(v_u[after], _ramp(v1 + dv, settings.a_u, dist))
    return VelocityCorridor(s.copy(), v_l, v_u, p.m)


def full_power_step(v, alpha, delta_s, p: VehicleParams, e: EngineParams, power_fraction: float = 1.0):
    """Speed after one step at maximum tractive force/power with the powertrain closed."""
    K = p.kinetic_energy(v)
    F_t = min(p.F_t_max, power_fraction * p.P_max / v)
    try:
        x = plant_step(KineticState(0.0, K), ControlInput(F_t, 0.0, 1), alpha, delta_s, p, e)
    except VehicleStopped:
        return 0.0
    return p.speed(x.K)


def repair_feasibility(
    vc: VelocityCorridor,
    c: DrivingCycle,
    p: VehicleParams,
    e: EngineParams | None = None,
    power_fraction: float = 1.0,
) -> VelocityCorridor:
    """Lower v_l wherever a full-power vehicle starting on v_l could not keep up.

    The per-step gain is evaluated with the plant model on the local grade,
    so it is negative on climbs the vehicle cannot hold at full power.
    `power_fraction` < 1 leaves headroom for model mismatch in the controller.
    """
    e = e or EngineParams()
    alpha = c.alpha
    v_l = vc.v_l.copy()
    for k in range(1, len(v_l)):
        reachable = full_power_step(v_l[k - 1], alpha[k - 1], c.delta_s, p, e, power_fraction)
        if reachable < v_l[k]:
            v_l[k] = reachable
    return VelocityCorridor(vc.s, v_l, vc.v_u, vc.m)


def make_corridor(c, settings, p, e=None, power_fraction: float = 1.0) -> VelocityCorridor:
    return repair_feasibility(build_corridor(c, settings, p), c, p, e, power_fraction)
