import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freewheel_mpc.corridor import (
    BENCHMARK,
    KMH,
    WIDE,
    CorridorCollapse,
    CorridorSettings,
    VelocityCorridor,
    build_corridor,
    full_power_step,
    make_corridor,
    mean_decel,
    repair_feasibility,
    std_decel,
)
from freewheel_mpc.cycle import DrivingCycle
from tests.factories import E, P, flat_cycle, synthetic
from tests.oracles import decel_polynomials_exact


@pytest.mark.parametrize("v1,v2,mu,sig", [(20, 0, 1.168, 0.3934), (20, 20, 0.006, None), (0, 0, 0.366, 0.187)])
def test_decel_polynomials(v1, v2, mu, sig):
    m_ref, s_ref = decel_polynomials_exact(v1, v2)
    assert mean_decel(v1, v2) == pytest.approx(m_ref, rel=1e-12)
    assert std_decel(v1, v2) == pytest.approx(s_ref, rel=1e-12)
    assert mean_decel(v1, v2) == pytest.approx(mu, rel=1e-12)
    if sig is not None:
        assert std_decel(v1, v2) == pytest.approx(sig, rel=1e-12)


def test_table_settings():
    assert BENCHMARK.delta_v == pytest.approx(1 / 3.6)
    assert (BENCHMARK.n_sigma, BENCHMARK.a_l, BENCHMARK.a_u) == (0.5, 0.3, 0.4)
    assert WIDE.delta_v == pytest.approx(4 / 3.6)
    assert (WIDE.n_sigma, WIDE.a_l, WIDE.a_u) == (1.0, 0.25, 0.6)
    with pytest.raises(ValueError):
        CorridorSettings(1.0, 0.5, 0.5, 0.4)


def test_constant_speed_band():
    c = flat_cycle(3000, 20.0)
    vc = build_corridor(c, BENCHMARK, P)
    assert np.allclose(vc.v_l, 20 - KMH)
    assert np.allclose(vc.v_u, 20 + KMH)
    assert np.allclose(vc.K_l, 0.5 * P.m * vc.v_l**2)
    # flat road with ample power: repair changes nothing
    assert np.array_equal(repair_feasibility(vc, c, P, E).v_l, vc.v_l)


def _step_cycle(v1_kmh, v2_kmh, n1=80, n2=80):
    v = np.concatenate([np.full(n1, v1_kmh * KMH), np.full(n2, v2_kmh * KMH)])
    return DrivingCycle(15.0 * np.arange(len(v)), np.zeros(len(v)), v, 15.0)


def test_zero_sigma_keeps_width():
    c = _step_cycle(70, 50)
    st_ = CorridorSettings(4 * KMH, 0.0, 0.25, 0.6)
    vc = build_corridor(c, st_, P)
    width = vc.v_u - vc.v_l
    assert np.all(width <= 2 * st_.delta_v + 1e-12)
    # equal decelerations keep v_u^2 - v_l^2 fixed, so the speed gap shrinks
    # to 4*v2*dv/(v_l + v_u) at the top of the ramp
    v2 = 50 * KMH
    floor = 4 * v2 * st_.delta_v / (2 * 70 * KMH)
    assert np.all(width >= floor - 1e-9)


def test_ramp_lengths_follow_sigma_term():
    c = _step_cycle(70, 50)
    s_e = c.s[80]
    dv = WIDE.delta_v
    v1, v2 = 70 * KMH, 50 * KMH
    mu, sig = mean_decel(v1, v2), std_decel(v1, v2)
    vc = build_corridor(c, WIDE, P)
    for bound, v_hi, v_lo, d in ((vc.v_l, v1 - dv, v2 - dv, mu - sig), (vc.v_u, v1 + dv, v2 + dv, mu + sig)):
        expected = (v_hi**2 - v_lo**2) / (2 * d)
        start = c.s[np.argmax(bound < v_hi - 1e-12)]
        assert s_e - start == pytest.approx(expected, abs=15.0)
    # the lower bound starts its descent earlier, so the corridor widens
    assert np.argmax(vc.v_l < v1 - dv - 1e-12) < np.argmax(vc.v_u < v1 + dv - 1e-12)


def test_acceleration_ramps():
    c = _step_cycle(50, 70)
    vc = build_corridor(c, WIDE, P)
    dv = WIDE.delta_v
    k = 85
    dist = c.s[k] - c.s[80]
    assert vc.v_l[k] == pytest.approx(math.sqrt((50 * KMH - dv) ** 2 + 2 * 0.25 * dist))
    assert vc.v_u[k] == pytest.approx(math.sqrt((50 * KMH + dv) ** 2 + 2 * 0.6 * dist))


def _steady_climb_speed(grade):
    from scipy.optimize import brentq

    a = math.atan(grade)
    load = P.m * P.g * (math.sin(a) + P.c_r * math.cos(a))
    p_drag = E.drag_power(E.omega_c)
    k_air = 0.5 * P.rho * P.A_f * P.c_d

    def surplus(v):
        return min(P.F_t_max, P.P_max / v) - p_drag / v - load - k_air * v * v

    return brentq(surplus, 1.0, 40.0)


def test_repair_on_steep_climb():
    n = 800
    c = DrivingCycle(15.0 * np.arange(n), np.full(n, 0.043), np.full(n, 80 * KMH), 15.0)
    vc = build_corridor(c, BENCHMARK, P)
    rep = repair_feasibility(vc, c, P, E)
    v_ss = _steady_climb_speed(0.043)
    assert v_ss < 80 * KMH - BENCHMARK.delta_v
    assert np.all(np.diff(rep.v_l[1:]) < 0)
    assert rep.v_l[-1] == pytest.approx(v_ss, rel=1e-3)
    again = repair_feasibility(rep, c, P, E)
    assert np.array_equal(again.v_l, rep.v_l)


def test_collapse_detected():
    s = np.arange(3.0)
    with pytest.raises(CorridorCollapse):
        VelocityCorridor(s, np.array([1.0, 2.0, 3.0]), np.array([2.0, 1.0, 4.0]), P.m)
    with pytest.raises(CorridorCollapse):
        VelocityCorridor(s, np.array([0.0, 2.0, 3.0]), np.array([2.0, 3.0, 4.0]), P.m)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 500), frac=st.floats(0.0, 1.0))
def test_full_power_stays_above_lower_bound(seed, frac):
    c = synthetic(seed, 3000.0)
    vc = make_corridor(c, WIDE, P, E)
    v = vc.v_l[0] + frac * (vc.v_u[0] - vc.v_l[0])
    for k in range(len(c) - 1):
        v = full_power_step(v, c.alpha[k], c.delta_s, P, E)
        assert v >= vc.v_l[k + 1] * (1 - 1e-12)
