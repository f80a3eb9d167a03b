"""Independent reference computations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np


def enumerate_active_sets(Q, c, E, d, G, h, tol=1e-9):
    """Exact QP optimum by brute force over inequality active sets.

    For every subset W of inequality rows the equality-constrained KKT
    system is solved densely; the candidate that is primal feasible and has
    non-negative multipliers is the optimum (unique for positive definite Q).
    """
    Q = np.asarray(Q, float)
    n = len(c)
    E = np.zeros((0, n)) if E is None else np.asarray(E, float)
    d = np.zeros(0) if d is None else np.asarray(d, float)
    m = len(h)
    best = None
    for k in range(0, min(m, n - len(d)) + 1):
        for W in itertools.combinations(range(m), k):
            A = np.vstack([E, G[list(W)]]) if k else E
            b = np.concatenate([d, h[list(W)]]) if k else d
            r = A.shape[0]
            K = np.block([[Q, A.T], [A, np.zeros((r, r))]])
            rhs = np.concatenate([-c, b])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.linalg.norm(K @ sol - rhs) > 1e-8 * (1 + np.linalg.norm(rhs)):
                continue
            x = sol[:n]
            lam = sol[n + len(d):]
            scale = 1 + np.max(np.abs(h))
            if np.any(G @ x > h + tol * scale) or np.any(lam < -tol * (1 + np.max(np.abs(sol)))):
                continue
            f = 0.5 * x @ Q @ x + c @ x
            if best is None or f < best[0]:
                best = (f, x)
    return best


def random_feasible_qp(rng, n_max=30, m_max=10):
    n = int(rng.integers(1, n_max + 1))
    n_eq = int(rng.integers(0, min(3, n - 1) + 1)) if n > 1 else 0
    m = int(rng.integers(1, m_max + 1))
    M = rng.standard_normal((n, n))
    Q = M @ M.T / n + 0.1 * np.eye(n)
    c = rng.standard_normal(n) * 3
    E = rng.standard_normal((n_eq, n))
    x0 = rng.standard_normal(n)
    d = E @ x0
    G = rng.standard_normal((m, n))
    slack = rng.random(m) * (rng.random(m) < 0.6)
    h = G @ x0 + slack
    return Q, c, E, d, G, h


# ---------------------------------------------------------------------------
# vehicle and corridor


def ode_step(K0, force, delta_s, p):
    """Integrate m*v*dv/ds = force - 0.5*rho*A_f*c_d*v^2 over delta_s with an adaptive RK.

    `force` is everything except air drag, held constant over the step. The
    speed formulation is deliberately different from the energy form used by
    the package.
    """
    from scipy.integrate import solve_ivp

    k_air = 0.5 * p.rho * p.A_f * p.c_d

    def rhs(s, y):
        v = y[0]
        return [(force - k_air * v * v) / (p.m * v)]

    v0 = np.sqrt(2.0 * K0 / p.m)
    sol = solve_ivp(rhs, (0.0, delta_s), [v0], method="DOP853", rtol=1e-13, atol=1e-12)
    v1 = sol.y[0, -1]
    return 0.5 * p.m * v1 * v1


def decel_polynomials_exact(v1, v2):
    """Mean and std deceleration evaluated in exact rational arithmetic."""
    from fractions import Fraction as F

    a, b = F(str(v1)), F(str(v2))
    mean = (F("0.366") + F("0.0771") * a - F("0.0849") * b
            - F("0.00185") * a * a + F("0.00348") * a * b - F("0.00214") * b * b)
    std = (F("0.187") + F("0.0250") * a - F("0.0327") * b
           - F("0.000734") * a * a + F("0.00187") * a * b - F("0.00101") * b * b)
    return float(mean), float(std)


# ---------------------------------------------------------------------------
# horizon problem


def reference_cost(inst, x):
    """Scalar-loop evaluation of the horizon cost from the unpacked variables."""
    v = inst.unpack(x)
    co = inst.coeffs
    ds = inst.delta_s
    total = 0.0
    for j in range(inst.N):
        K = v["K"][j]
        total += ds * v["F_t"][j]
        total += ds * inst.drag_power_open * co.varphi0[j] * (1.0 - v["z"][j])
        total += inst.beta_g * v["delta"][j]
        total += inst.beta_t * ds * (co.theta0[j] + co.theta1[j] * K + co.theta2[j] * K * K)
    total -= v["K"][inst.N]
    return total


def enumerate_patterns(inst):
    """Exhaustive MIQP optimum: one convex QP per Boolean pattern."""
    import itertools

    from freewheel_mpc.qp import OPTIMAL, solve_qp

    best = (np.inf, None, None)
    for bits in itertools.product((0.0, 1.0), repeat=len(inst.z)):
        sol = solve_qp(inst.fix_booleans(np.array(bits)), x_scale=inst.x_scale)
        if sol.status == OPTIMAL and sol.objective < best[0]:
            best = (sol.objective, np.array(bits), sol)
    return best


def ode_air_work(K0, force, delta_s, p):
    """Air-drag work over one step, integrated alongside the speed ODE."""
    from scipy.integrate import solve_ivp

    k_air = 0.5 * p.rho * p.A_f * p.c_d

    def rhs(s, y):
        v = y[0]
        return [(force - k_air * v * v) / (p.m * v), k_air * v * v]

    v0 = np.sqrt(2.0 * K0 / p.m)
    sol = solve_ivp(rhs, (0.0, delta_s), [v0, 0.0], method="DOP853", rtol=1e-12, atol=1e-9)
    return sol.y[1, -1]
