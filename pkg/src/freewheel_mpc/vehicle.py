"""Longitudinal vehicle model in the kinetic-energy / position domain.

State is the kinetic energy K = m v^2 / 2 as a function of position s, which
makes air drag linear in the state:

    dK/ds = F_fw + F_b + F_a(K) + F_r + F_g

All forces are in N, energies in J, positions in m.
"""

from __future__ import annotations

import math

import numpy as np
from dataclasses import dataclass

RPM = 2.0 * math.pi / 60.0


class VehicleStopped(RuntimeError):
    """Raised when a plant step would drive the kinetic energy to zero or below."""


@dataclass(frozen=True)
class VehicleParams:
    m: float = 26000.0  # kg
    r_w: float = 0.5  # m, stored only; no force/torque conversion uses it
    c_d: float = 0.5
    rho: float = 1.292  # kg/m^3
    A_f: float = 10.0  # m^2
    c_r: float = 0.006
    g: float = 9.81  # m/s^2
    # not given in Table-1 style data; configurable defaults
    F_t_max: float = 50e3  # N
    F_b_max: float = 150e3  # N
    P_max: float = 300e3  # W

    def __post_init__(self):
        for name in ("m", "r_w", "c_d", "rho", "A_f", "c_r", "g", "F_t_max", "F_b_max", "P_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleParams.{name} must be > 0, got {getattr(self, name)}")
        if self.c_r >= 0.1:
            raise ValueError(f"c_r must be < 0.1, got {self.c_r}")
        if self.c_d >= 2:
            raise ValueError(f"c_d must be < 2, got {self.c_d}")

    @property
    def air_coeff(self) -> float:
        """Continuous-time state coefficient A_c = -rho*A_f*c_d/m (1/m)."""
        return -self.rho * self.A_f * self.c_d / self.m

    def kinetic_energy(self, v):
        return 0.5 * self.m * v * v

    def speed(self, K):
        return math.sqrt(2.0 * K / self.m)


@dataclass(frozen=True)
class EngineParams:
    omega_c: float = 1100 * RPM  # rad/s
    omega_o: float = 500 * RPM  # rad/s, idle; 0 for engine off
    T_d0: float = 20.0  # N m, configuration default (not a published value)
    T_d1: float = 0.12  # N m s/rad, configuration default
    J_e: float = 4.0  # kg m^2

    def __post_init__(self):
        if not self.omega_c > self.omega_o >= 0:
            raise ValueError(
                f"need omega_c > omega_o >= 0, got omega_c={self.omega_c}, omega_o={self.omega_o}"
            )
        if self.T_d0 < 0 or self.T_d1 < 0:
            raise ValueError("drag torque coefficients must be non-negative")
        if not self.J_e > 0:
            raise ValueError("J_e must be > 0")

    def drag_power(self, omega: float) -> float:
        """Engine drag power omega * T_d(omega) in W."""
        return omega * drag_torque(omega, self)


@dataclass(frozen=True)
class KineticState:
    s: float
    K: float

    def speed(self, p: VehicleParams) -> float:
        return p.speed(self.K)


@dataclass(frozen=True)
class ControlInput:
    F_t: float = 0.0
    F_b: float = 0.0
    z: int = 1

    def check(self, p: VehicleParams, tol: float = 1e-6) -> None:
        """Raise ValueError unless the force/brake limits hold (with absolute slack `tol` in N)."""
        if self.z not in (0, 1):
            raise ValueError(f"z must be 0 or 1, got {self.z}")
        if not -tol <= self.F_t <= p.F_t_max * self.z + tol:
            raise ValueError(f"F_t={self.F_t} outside [0, {p.F_t_max * self.z}]")
        if not -p.F_b_max - tol <= self.F_b <= tol:
            raise ValueError(f"F_b={self.F_b} outside [{-p.F_b_max}, 0]")


def air_force(K, p: VehicleParams):
    return -p.rho * p.A_f * p.c_d * K / p.m


def roll_force(alpha, p: VehicleParams):
    return -p.m * p.g * p.c_r * np.cos(alpha)


def gravity_force(alpha, p: VehicleParams):
    return -p.m * p.g * np.sin(alpha)


def drag_torque(omega, e: EngineParams):
    return e.T_d0 + e.T_d1 * omega


def drag_force_exact(K, omega, p: VehicleParams, e: EngineParams):
    """Engine drag at the wheels, omega*T_d(omega)/v, written in K."""
    if K <= 0:
        raise ValueError(f"drag force undefined for K={K} <= 0")
    return omega * drag_torque(omega, e) * math.sqrt(p.m / 2.0) / math.sqrt(K)


def discretize(alpha, delta_s, p: VehicleParams):
    """Exact zero-order-hold discretization of dK/ds = A_c K + F over one step.

    Returns (A, B, w) such that K_next = A*K + B*F + w, where F is the applied
    (tractive - drag + brake) force held constant over the step and w carries
    the rolling and gravity terms.
    """
    if delta_s <= 0:
        raise ValueError(f"delta_s must be > 0, got {delta_s}")
    a_c = p.air_coeff
    A = math.exp(a_c * delta_s)
    x = a_c * delta_s
    if abs(x) < 1e-12:
        B = delta_s
    else:
        B = math.expm1(x) / a_c
    w = -B * p.m * p.g * (math.sin(alpha) + p.c_r * math.cos(alpha))
    return A, B, w


def applied_force(K, u: ControlInput, p: VehicleParams, e: EngineParams) -> float:
    """Net force from the driveline and brakes, with exact engine drag at K."""
    drag = drag_force_exact(K, e.omega_c, p, e) if u.z else 0.0
    return u.F_t - drag + u.F_b


def plant_step(x: KineticState, u: ControlInput, alpha, delta_s, p: VehicleParams, e: EngineParams):
    """Advance the nonlinear plant by one spatial step.

    Engine drag is the exact K^-1/2 expression frozen at the step's initial K.
    """
    if x.K <= 0:
        raise VehicleStopped(f"K={x.K} at s={x.s}")
    u.check(p)
    A, B, w = discretize(alpha, delta_s, p)
    K_next = A * x.K + B * applied_force(x.K, u, p, e) + w
    if K_next <= 0:
        raise VehicleStopped(f"vehicle stops within step starting at s={x.s:.1f} m")
    return KineticState(x.s + delta_s, K_next)
