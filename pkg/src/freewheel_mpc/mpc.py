"""Receding-horizon closed loop and trip-time penalty tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bnb import BNB_INFEASIBLE, BnbLimits, solve_miqp
from .corridor import VelocityCorridor
from .cycle import DrivingCycle
from .ocp import MCCORMICK, InfeasibleInstance, PolicyConfig, beta_g, build_instance
from .vehicle import (
    ControlInput,
    EngineParams,
    KineticState,
    VehicleParams,
    drag_force_exact,
    plant_step,
)

log = logging.getLogger(__name__)

FORCE_SNAP = 1e-6  # fraction of the force limit below which applied forces are zeroed


class MpcInfeasible(RuntimeError):
    def __init__(self, step: int, s: float, detail: str = ""):
        super().__init__(f"no feasible plan at step {step} (s={s:.1f} m){': ' + detail if detail else ''}")
        self.step = step
        self.s = s


class SolverLimit(RuntimeError):
    """The MIQP search stopped at its limits without any feasible incumbent."""


class TuningError(ValueError):
    pass


def closed_loop_limits() -> BnbLimits:
    """Search budget per MPC step used by the closed loop.

    A full proof of optimality at 60 Booleans is out of reach for every step,
    so the tree search is capped and the incumbent is strengthened with a
    switch-point local search seeded by the shifted previous plan.
    """
    return BnbLimits(node_limit=4, local_search=2)


@dataclass
class MpcConfig:
    policy: PolicyConfig
    N_H: int = 60
    delta_s: float = 15.0
    beta_t: float = 3e4  # W
    sqp_passes: int = 1
    drag_mode: str = MCCORMICK
    limits: BnbLimits = field(default_factory=closed_loop_limits)

    def __post_init__(self):
        if self.N_H < 2:
            raise ValueError("N_H must be >= 2")
        if not self.delta_s > 0:
            raise ValueError("delta_s must be > 0")
        if self.beta_t < 0:
            raise ValueError("beta_t must be >= 0")
        if self.sqp_passes < 1:
            raise ValueError("sqp_passes must be >= 1")


@dataclass(eq=False)
class SimulationRecord:
    """Closed-loop trajectory. State arrays have n entries, per-step arrays n-1."""

    policy: str
    beta_t: float
    beta_g: float
    idle_power: float  # W drawn while the powertrain is open
    delta_s: float
    s: np.ndarray
    K: np.ndarray
    v: np.ndarray
    alpha: np.ndarray
    F_t: np.ndarray
    F_b: np.ndarray
    z: np.ndarray
    z_init: int
    gear_change: np.ndarray
    F_dc: np.ndarray  # exact closed-powertrain drag at the step's initial K
    dt: np.ndarray
    K_l: np.ndarray
    K_u: np.ndarray
    plan_violation: np.ndarray  # worst corridor violation of each solver plan, fraction of width
    nodes: np.ndarray
    bnb_status: list
    wall_time: float = 0.0

    @property
    def trip_time(self) -> float:
        return float(self.dt.sum())

    @property
    def n_gear_changes(self) -> int:
        return int(self.gear_change.sum())

    def corridor_violation(self) -> np.ndarray:
        """Per-sample violation of [K_l, K_u] as a fraction of the local corridor width."""
        width = np.maximum(self.K_u - self.K_l, 1e-9)
        over = np.maximum(self.K - self.K_u, 0.0)
        under = np.maximum(self.K_l - self.K, 0.0)
        return np.maximum(over, under) / width

    def save_csv(self, path) -> None:
        """Columns s_m,v_mps,K_J,F_t_N,F_b_N,z,dt_s; the last row has no control."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s_m", "v_mps", "K_J", "F_t_N", "F_b_N", "z", "dt_s"])
            n = len(self.s)
            for i in range(n):
                row = [repr(float(self.s[i])), repr(float(self.v[i])), repr(float(self.K[i]))]
                if i < n - 1:
                    row += [repr(float(self.F_t[i])), repr(float(self.F_b[i])), str(int(self.z[i])),
                            repr(float(self.dt[i]))]
                else:
                    row += ["", "", "", ""]
                w.writerow(row)


def _horizon(arr: np.ndarray, k: int, length: int) -> np.ndarray:
    """arr[k:k+length], holding the last value past the end."""
    out = arr[k : k + length]
    if len(out) < length:
        out = np.concatenate([out, np.full(length - len(out), arr[-1])])
    return out


def run_mpc(
    cycle: DrivingCycle,
    corridor: VelocityCorridor,
    p: VehicleParams,
    e: EngineParams,
    cfg: MpcConfig,
    K0: float | None = None,
    z0: int = 1,
    solver=solve_miqp,
) -> SimulationRecord:
    """Simulate the closed loop over the whole cycle.

    At every step the horizon problem is rebuilt around the previous plan
    (shifted one step), solved, and only its first control is applied to the
    plant. Near the end of the cycle the horizon shrinks to the remaining
    steps (with a minimum of two, padding past the end by holding the last
    sample).
    """
    if not math.isclose(cycle.delta_s, cfg.delta_s, rel_tol=1e-9):
        raise ValueError(f"cycle spacing {cycle.delta_s} m differs from MPC step {cfg.delta_s} m")
    if len(corridor) != len(cycle):
        raise ValueError("corridor and cycle lengths differ")
    t_start = time.monotonic()
    n = len(cycle)
    steps = n - 1
    K_l, K_u = corridor.K_l, corridor.K_u
    alpha = cycle.alpha
    pol = cfg.policy
    e_pol = pol.engine(e)
    idle_power = e_pol.drag_power(e_pol.omega_o)

    if K0 is None:
        K0 = p.kinetic_energy(float(cycle.v_ref[0]))
    K = np.empty(n)
    K[0] = min(max(K0, K_l[0]), K_u[0])
    F_t = np.zeros(steps)
    F_b = np.zeros(steps)
    z = np.zeros(steps, dtype=int)
    F_dc = np.zeros(steps)
    dt = np.zeros(steps)
    plan_violation = np.zeros(steps)
    nodes = np.zeros(steps, dtype=int)
    statuses = []

    prev_K = None
    prev_z = None
    z_last = int(z0)
    for k in range(steps):
        N = max(2, min(cfg.N_H, steps - k))
        a_h = _horizon(alpha, k, N)
        Kl_h = _horizon(K_l, k, N + 1)
        Ku_h = _horizon(K_u, k, N + 1)
        if prev_K is None:
            K_r = _horizon(0.5 * (K_l + K_u), k, N + 1)
        else:
            K_r = _horizon(prev_K, 1, N + 1)
        # the first step is linearized at the measured state, so the
        # controller's first-step drag equals the plant's
        K_r = K_r.copy()
        K_r[0] = K[k]
        K_r = np.maximum(K_r, 0.5 * Kl_h.min())

        patterns = []
        if pol.freewheel:
            if prev_z is not None:
                shifted = np.concatenate([prev_z[1:], [prev_z[-1]]])
                patterns.append(_horizon(shifted, 0, N))
            patterns.append(np.ones(N))

        report = None
        for _ in range(cfg.sqp_passes):
            try:
                inst = build_instance(K[k], z_last, a_h, Kl_h, Ku_h, K_r, p, e, pol, cfg.beta_t,
                                      cfg.delta_s, cfg.drag_mode)
            except InfeasibleInstance as exc:
                raise MpcInfeasible(k, cycle.s[k], str(exc)) from exc
            report = solver(inst, cfg.limits, initial_patterns=patterns)
            if report.incumbent is None:
                if report.status == BNB_INFEASIBLE:
                    raise MpcInfeasible(k, cycle.s[k])
                raise SolverLimit(f"no incumbent at step {k} ({report.status})")
            plan = inst.unpack(report.incumbent.x)
            K_r = np.maximum(plan["K"], 0.5 * Kl_h.min())
            K_r[0] = K[k]
            if pol.freewheel:
                patterns = [np.round(plan["z"])]

        plan_K = plan["K"]
        width = np.maximum(Ku_h[1:] - Kl_h[1:], 1e-9)
        plan_violation[k] = float(np.max(np.maximum(np.maximum(Kl_h[1:] - plan_K[1:], plan_K[1:] - Ku_h[1:]), 0) / width))
        nodes[k] = report.nodes_explored
        statuses.append(report.status)

        zk = int(round(plan["z"][0]))
        ft = float(np.clip(plan["F_t"][0], 0.0, p.F_t_max * zk))
        fb = float(np.clip(plan["F_b"][0], -p.F_b_max, 0.0))
        # interior-point residue at an active bound is not a real force
        if ft < FORCE_SNAP * p.F_t_max:
            ft = 0.0
        if -fb < FORCE_SNAP * p.F_b_max:
            fb = 0.0
        u = ControlInput(ft, fb, zk)
        x_next = plant_step(KineticState(cycle.s[k], K[k]), u, alpha[k], cfg.delta_s, p, e)
        K[k + 1] = x_next.K
        F_t[k], F_b[k], z[k] = ft, fb, zk
        F_dc[k] = drag_force_exact(K[k], e.omega_c, p, e)
        dt[k] = cfg.delta_s * math.sqrt(p.m / 2.0) / math.sqrt(K[k])
        z_last = zk
        prev_K = plan_K
        prev_z = np.round(plan["z"]).astype(int)

    z_seq = np.concatenate([[int(z0)], z])
    gear_change = np.diff(z_seq) != 0
    return SimulationRecord(
        policy=pol.name, beta_t=cfg.beta_t, beta_g=beta_g(e_pol) if pol.freewheel else 0.0,
        idle_power=idle_power, delta_s=cfg.delta_s, s=cycle.s.copy(), K=K, v=np.sqrt(2 * K / p.m),
        alpha=alpha[:steps].copy(), F_t=F_t, F_b=F_b, z=z, z_init=int(z0), gear_change=gear_change,
        F_dc=F_dc, dt=dt, K_l=K_l.copy(), K_u=K_u.copy(), plan_violation=plan_violation, nodes=nodes,
        bnb_status=statuses, wall_time=time.monotonic() - t_start,
    )


def corridor_time_bounds(corridor: VelocityCorridor, delta_s: float) -> tuple[float, float]:
    """Trip times when driving exactly on v_u (fastest) and on v_l (slowest)."""
    fast = float(np.sum(delta_s / corridor.v_u[:-1]))
    slow = float(np.sum(delta_s / corridor.v_l[:-1]))
    return fast, slow


@dataclass
class TuningResult:
    beta_t: float
    record: SimulationRecord
    history: list  # (beta_t, trip_time)


def tune_beta_t(
    target_time: float,
    cycle: DrivingCycle,
    corridor: VelocityCorridor,
    p: VehicleParams,
    e: EngineParams,
    cfg: MpcConfig,
    rel_tol: float = 0.005,
    max_iter: int = 20,
    accept_tol: float = 0.005,
    **run_kwargs,
) -> TuningResult:
    """Find beta_t whose closed-loop trip time is within rel_tol of target_time.

    Trip time is non-increasing in beta_t, so the search first brackets the
    target (geometric steps from cfg.beta_t, with beta_t = 0 as the slow end)
    and then shrinks the bracket by false-position steps in log(beta_t),
    falling back to geometric bisection when one end stalls. If the iteration
    budget runs out, or the target lies just outside what the policy can
    reach, the closest run is returned provided it is within accept_tol.
    """
    fast, slow = corridor_time_bounds(corridor, cfg.delta_s)
    if not fast <= target_time <= slow:
        raise TuningError(f"target {target_time:.1f} s outside corridor times [{fast:.1f}, {slow:.1f}] s")
    accept_tol = max(accept_tol, rel_tol)
    history = []
    best = None

    def run(beta):
        nonlocal best
        c = MpcConfig(cfg.policy, cfg.N_H, cfg.delta_s, beta, cfg.sqp_passes, cfg.drag_mode, cfg.limits)
        rec = run_mpc(cycle, corridor, p, e, c, **run_kwargs)
        history.append((beta, rec.trip_time))
        err = abs(rec.trip_time - target_time) / target_time
        if best is None or err < best[0]:
            best = (err, beta, rec)
        log.info("tune %s: beta_t=%.4g trip=%.2f s target=%.2f s", cfg.policy.name, beta, rec.trip_time, target_time)
        return rec.trip_time

    def done():
        return best[0] <= rel_tol

    def fallback(reason):
        if best[0] <= accept_tol:
            log.warning("beta_t tuning for %s: %s; using closest run (error %.3g)", cfg.policy.name, reason, best[0])
            return TuningResult(best[1], best[2], history)
        times = [h[1] for h in history]
        raise TuningError(f"{reason}: target {target_time:.1f} s, trip times ranged "
                          f"{min(times):.1f}-{max(times):.1f} s")

    beta = cfg.beta_t if cfg.beta_t > 0 else 1e4
    t = run(beta)
    if done():
        return TuningResult(best[1], best[2], history)
    if t > target_time:
        lo, t_lo = beta, t
        while True:
            if len(history) >= max_iter:
                return fallback("could not bracket the target")
            b = lo * 4.0
            tb = run(b)
            if done():
                return TuningResult(best[1], best[2], history)
            if tb <= target_time:
                hi, t_hi = b, tb
                break
            if b > 1e9:
                return fallback("target faster than any trip time reached")
            lo, t_lo = b, tb
    else:
        hi, t_hi = beta, t
        steps = 0
        while True:
            if len(history) >= max_iter:
                return fallback("could not bracket the target")
            b = hi / 4.0 if steps < 3 else 0.0
            steps += 1
            tb = run(b)
            if done():
                return TuningResult(best[1], best[2], history)
            if tb >= target_time:
                lo, t_lo = b, tb
                break
            if b == 0.0:
                return fallback("target slower than the policy drives without time pressure")
            hi, t_hi = b, tb

    side = 0
    while len(history) < max_iter:
        if lo > 0.0 and hi / lo < 1.0 + 1e-3:
            # trip time jumps across the target between two almost equal weights
            return fallback("trip time is discontinuous at the target")
        if lo == 0.0:
            # no log-scale interpolation towards zero; shrink hi geometrically
            b = hi / 16.0
        else:
            x_lo, x_hi = math.log(lo), math.log(hi)
            frac = (t_lo - target_time) / (t_lo - t_hi) if t_lo != t_hi else 0.5
            if abs(side) >= 2:
                frac, side = 0.5, 0
            b = math.exp(x_lo + min(max(frac, 0.1), 0.9) * (x_hi - x_lo))
        tb = run(b)
        if done():
            return TuningResult(best[1], best[2], history)
        if tb > target_time:
            lo, t_lo = b, tb
            side = side + 1 if side >= 0 else 1
        else:
            hi, t_hi = b, tb
            side = side - 1 if side <= 0 else -1
    return fallback(f"no convergence in {max_iter} runs")
