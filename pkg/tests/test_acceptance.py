"""Acceptance criteria, one test per criterion.

The closed-loop criteria (7, 8) share one set of runs: ten 5 km synthetic
cycles, four policies each, with every non-benchmark policy's trip-time
weight tuned to the benchmark trip time.
"""

import math
import time

import numpy as np
import pytest

from freewheel_mpc.accounting import compare_policies, decompose
from freewheel_mpc.approx import taylor_coeffs
from freewheel_mpc.bnb import BNB_OPTIMAL, solve_miqp
from freewheel_mpc.corridor import KMH, mean_decel, std_decel
from freewheel_mpc.mpc import MpcConfig, run_mpc, tune_beta_t
from freewheel_mpc.ocp import FROZEN, POLICY_NAMES, policy_config
from freewheel_mpc.qp import OPTIMAL, QpProblem, solve_qp
from freewheel_mpc.vehicle import (
    ControlInput,
    KineticState,
    VehicleStopped,
    applied_force,
    gravity_force,
    plant_step,
    roll_force,
)
from tests.factories import E, P, corridor_for, flat_cycle, random_instance, synthetic
from tests.oracles import (
    decel_polynomials_exact,
    enumerate_active_sets,
    enumerate_patterns,
    ode_step,
    random_feasible_qp,
)

SEEDS = range(10)
CYCLE_M = 5000.0
TUNE_REL_TOL = 0.001


def _report(num, ok, detail):
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")


def test_criterion_1_taylor_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    K_r = rng.uniform(1e4, 2e7, 100)
    co = taylor_coeffs(K_r, P.m)
    inv_v = np.sqrt(P.m / 2) / np.sqrt(K_r)
    at_ref = max(np.max(np.abs(f(K_r) / inv_v - 1)) for f in (co.second_order, co.first_order, co.zeroth_order))
    worst = 0.0
    for frac in np.linspace(-0.1, 0.1, 41):
        K = K_r * (1 + frac)
        worst = max(worst, np.max(np.abs(co.second_order(K) / (np.sqrt(P.m / 2) / np.sqrt(K)) - 1)))
    elapsed = time.perf_counter() - t0
    ok = at_ref < 1e-12 and worst < 1.5e-3 and elapsed < 1.0
    _report(1, ok, f"identity {at_ref:.2e}, excursion error {worst:.3e}, {elapsed:.3f} s")
    assert at_ref < 1e-12
    assert worst < 1.5e-3
    assert elapsed < 1.0


def test_criterion_2_discretization_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    n = 0
    while n < 1000:
        v = rng.uniform(5.0, 25.0)
        K = 0.5 * P.m * v * v
        alpha = math.atan(rng.uniform(-0.043, 0.043))
        z = int(rng.integers(0, 2))
        u = ControlInput(rng.uniform(0, P.F_t_max) * z, -rng.uniform(0, P.F_b_max) * rng.integers(0, 2), z)
        force = applied_force(K, u, P, E) + roll_force(alpha, P) + gravity_force(alpha, P)
        try:
            K_next = plant_step(KineticState(0.0, K), u, alpha, 15.0, P, E).K
        except VehicleStopped:
            continue  # sample stops the vehicle within the step
        if ode_step(K, force, 15.0, P) <= 0:
            continue
        worst = max(worst, abs(K_next / ode_step(K, force, 15.0, P) - 1))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 10.0
    _report(2, ok, f"max rel error {worst:.2e} over 1000 samples, {elapsed:.2f} s")
    assert worst < 1e-6
    assert elapsed < 10.0


def test_criterion_3_qp_core():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_obj = worst_kkt = 0.0
    for _ in range(200):
        Q, c, Eq, d, G, h = random_feasible_qp(rng, n_max=30, m_max=10)
        f_ref, _ = enumerate_active_sets(Q, c, Eq, d, G, h)
        sol = solve_qp(QpProblem(Q, c, Eq, d, G, h))
        assert sol.status == OPTIMAL
        worst_obj = max(worst_obj, abs(sol.objective - f_ref) / max(1.0, abs(f_ref)))
        worst_kkt = max(worst_kkt, sol.kkt.max())
    elapsed = time.perf_counter() - t0
    ok = worst_obj < 1e-7 and worst_kkt < 1e-8 and elapsed < 60.0
    _report(3, ok, f"objective {worst_obj:.2e}, KKT {worst_kkt:.2e}, {elapsed:.1f} s")
    assert worst_obj < 1e-7
    assert worst_kkt < 1e-8
    assert elapsed < 60.0


def _small_instance(i, K_r=None):
    rng = np.random.default_rng(500 + i)
    N = 3 + i % 8
    policy = ("freewheel_idle", "freewheel_off")[i % 2]
    return random_instance(rng, N, policy=policy, K_r=K_r)


def test_criterion_4_bnb_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        inst = _small_instance(i)
        f_ref, _, _ = enumerate_patterns(inst)
        rep = solve_miqp(inst)
        assert rep.status == BNB_OPTIMAL
        worst = max(worst, abs(rep.objective - f_ref) / abs(f_ref))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 300.0
    _report(4, ok, f"max rel gap to enumeration {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-6
    assert elapsed < 300.0


def test_criterion_5_linearization_exactness():
    worst_obj = worst_u = 0.0
    compared = 0
    for i in range(50):
        # re-linearize around the first plan so the realized K stays close to K_r
        first = solve_miqp(_small_instance(i))
        K_r = first.incumbent.x[_small_instance(i).K][:-1]
        inst = _small_instance(i, K_r=K_r)
        rep = solve_miqp(inst)
        v = inst.unpack(rep.incumbent.x)
        F_dc = inst.drag_closed(v["K"][:-1])
        worst_u = max(worst_u, np.max(np.abs(v["u"] - v["z"] * F_dc)) / np.max(np.abs(F_dc)))
        if np.max(np.abs(v["K"][:-1] / K_r - 1)) > 0.05:
            continue
        frozen = solve_miqp(random_instance(np.random.default_rng(500 + i), 3 + i % 8,
                                            policy=("freewheel_idle", "freewheel_off")[i % 2],
                                            mode=FROZEN, K_r=K_r))
        worst_obj = max(worst_obj, abs(rep.objective - frozen.objective) / abs(frozen.objective))
        compared += 1
    ok = compared > 0 and worst_obj < 0.01 and worst_u < 1e-8
    _report(5, ok, f"{compared} instances within 5% of K_r, objective gap {worst_obj:.2e}, u residual {worst_u:.2e}")
    assert compared > 0
    assert worst_obj < 0.01
    assert worst_u < 1e-8


def test_criterion_6_corridor_polynomials():
    cases = [((20, 0), mean_decel, 1.168, 0), ((20, 0), std_decel, 0.3934, 1), ((20, 20), mean_decel, 0.006, 0)]
    worst = 0.0
    for (v1, v2), fn, published, which in cases:
        exact = decel_polynomials_exact(v1, v2)[which]
        worst = max(worst, abs(fn(v1, v2) - exact))
        assert exact == pytest.approx(published, abs=5e-4)
    _report(6, worst < 1e-12, f"max deviation from exact evaluation {worst:.1e}")
    assert worst < 1e-12


def _compare_on_seed(seed):
    t0 = time.monotonic()
    cycle = synthetic(seed, CYCLE_M)
    records, corridors = {}, {}
    for name in POLICY_NAMES:
        corridors[name] = corridor_for(cycle, name)
    records["benchmark"] = run_mpc(cycle, corridors["benchmark"], P, E, MpcConfig(policy_config("benchmark", E)))
    target = records["benchmark"].trip_time
    beta = MpcConfig(policy_config("benchmark", E)).beta_t
    start = beta
    for name in POLICY_NAMES[1:]:
        cfg = MpcConfig(policy_config(name, E), beta_t=beta)
        res = tune_beta_t(target, cycle, corridors[name], P, E, cfg, rel_tol=TUNE_REL_TOL)
        records[name] = res.record
        beta = res.beta_t if res.beta_t >= 1.0 else start
    return records, time.monotonic() - t0


@pytest.fixture(scope="module")
def closed_loop_runs():
    return {seed: _compare_on_seed(seed) for seed in SEEDS}


@pytest.mark.slow
def test_criterion_7_closed_loop_feasibility(closed_loop_runs):
    worst_traj = worst_plan = 0.0
    for seed, (records, _) in closed_loop_runs.items():
        for name, rec in records.items():
            worst_traj = max(worst_traj, rec.corridor_violation().max())
            worst_plan = max(worst_plan, rec.plan_violation.max())
    # "zero" at solver solutions means zero up to interior-point round-off
    ok = worst_traj <= 0.01 and worst_plan <= 1e-6
    _report(7, ok, f"trajectory violation {worst_traj:.2e} of width, plan violation {worst_plan:.2e}")
    assert worst_traj <= 0.01
    assert worst_plan <= 1e-6


@pytest.mark.slow
def test_criterion_8_policy_ordering(closed_loop_runs):
    failures = []
    for seed, (records, wall) in closed_loop_runs.items():
        cmp = compare_policies(records, P)
        e = {n: cmp.energy_pct(n) for n in POLICY_NAMES}
        t = {n: cmp.time_pct(n) for n in POLICY_NAMES}
        savings = cmp.savings_pct("freewheel_off")
        ordered = e["freewheel_off"] <= e["freewheel_idle"] <= e["no_freewheel"] <= e["benchmark"]
        timed = all(abs(v - 100.0) <= 1.0 for v in t.values())
        banded = 5.0 <= savings <= 30.0
        fast = wall < 1800.0
        print(f"  seed {seed}: energy " + " / ".join(f"{e[n]:.2f}" for n in POLICY_NAMES)
              + ", time " + " / ".join(f"{t[n]:.2f}" for n in POLICY_NAMES)
              + f", savings {savings:.1f}%, {wall:.0f} s")
        for label, good in (("ordering", ordered), ("trip time", timed), ("savings band", banded), ("runtime", fast)):
            if not good:
                failures.append(f"seed {seed}: {label}")
    _report(8, not failures, "; ".join(failures) or "ordering, trip times, savings and runtime hold on all cycles")
    assert not failures, failures


def _open_intervals(z):
    z = np.asarray(z)
    starts = (z[1:] == 0) & (z[:-1] == 1)
    return int(starts.sum() + (z[0] == 0))


@pytest.mark.slow
def test_criterion_9_pulse_and_glide():
    # trip-time weight tuned to the benchmark time, as in every policy comparison
    cycle = flat_cycle(3000.0, 70 * KMH)
    target = run_mpc(cycle, corridor_for(cycle, "benchmark"), P, E,
                     MpcConfig(policy_config("benchmark", E))).trip_time
    counts = {}
    for name in ("freewheel_idle", "freewheel_off"):
        res = tune_beta_t(target, cycle, corridor_for(cycle, name), P, E,
                          MpcConfig(policy_config(name, E)), rel_tol=TUNE_REL_TOL)
        counts[name] = _open_intervals(res.record.z)
    ok = all(c >= 2 for c in counts.values())
    _report(9, ok, f"open-powertrain intervals {counts}")
    assert ok


def test_criterion_10_loss_categories():
    cycle = synthetic(0, CYCLE_M)
    rec = run_mpc(cycle, corridor_for(cycle, "benchmark"), P, E, MpcConfig(policy_config("benchmark", E)))
    b = decompose(rec, P)
    nonzero = all(getattr(b, k) > 0 for k in ("roll", "air", "brake", "engine_drag"))
    zero = b.idling == 0 and b.gear_change == 0
    closure = b.closure_error()
    ok = nonzero and zero and closure < 1e-3
    _report(10, ok, f"roll {b.roll:.3g} air {b.air:.3g} brake {b.brake:.3g} drag {b.engine_drag:.3g} J, "
            f"closure {closure:.1e}")
    assert nonzero and zero
    assert closure < 1e-3


@pytest.mark.slow
def test_brake_plus_drag_similar_for_idle_and_off(closed_loop_runs):
    """Soft check, reported but not asserted."""
    for seed, (records, _) in closed_loop_runs.items():
        a = decompose(records["freewheel_idle"], P)
        b = decompose(records["freewheel_off"], P)
        x, y = a.brake + a.engine_drag, b.brake + b.engine_drag
        rel = abs(x - y) / max(x, y, 1e-12)
        print(f"  seed {seed}: brake+drag idle {x:.3g} J, off {y:.3g} J, "
              f"{'within' if rel <= 0.15 else 'outside'} 15% ({100 * rel:.1f}%)")
