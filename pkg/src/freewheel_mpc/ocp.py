"""One horizon of the freewheeling optimal control problem as a standard-form MIQP.

Decision variables per step j = 0..N-1 (stored interleaved so that the
constraint matrix is banded):

    K_j     kinetic energy at the start of step j (K_0 fixed to the measured state)
    F_t_j   tractive force, 0 <= F_t <= z*F_t_max
    F_b_j   brake force, -F_b_max <= F_b <= 0
    z_j     powertrain closed (1) / open (0)
    u_j     z_j * F_dc_j, the engine drag actually transmitted (McCormick mode only)
    d_j     |z_j - z_{j-1}|, gear engage/disengage indicator

followed by the terminal K_N. Every cost term is in J.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .approx import TaylorCoeffs, taylor_coeffs
from .corridor import BENCHMARK, WIDE, CorridorSettings
from .qp import QpProblem
from .vehicle import EngineParams, VehicleParams, discretize, drag_torque

MCCORMICK = "mccormick"
FROZEN = "frozen"

POLICY_NAMES = ("benchmark", "no_freewheel", "freewheel_idle", "freewheel_off")


class InfeasibleInstance(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    name: str
    omega_o: float  # rad/s
    corridor: CorridorSettings
    freewheel: bool

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}; valid: {', '.join(POLICY_NAMES)}")
        if self.name in ("benchmark", "no_freewheel") and self.freewheel:
            raise ValueError(f"policy {self.name} keeps the powertrain closed")
        if self.name == "freewheel_off" and self.omega_o != 0:
            raise ValueError("engine-off freewheeling needs omega_o = 0")

    def engine(self, e: EngineParams) -> EngineParams:
        return replace(e, omega_o=self.omega_o)


def policy_config(name: str, e: EngineParams | None = None,
                  benchmark_corridor: CorridorSettings = BENCHMARK,
                  wide_corridor: CorridorSettings = WIDE) -> PolicyConfig:
    """Standard policy set; accepts dashes or underscores in the name."""
    e = e or EngineParams()
    key = name.replace("-", "_")
    if key == "benchmark":
        return PolicyConfig(key, e.omega_o, benchmark_corridor, False)
    if key == "no_freewheel":
        return PolicyConfig(key, e.omega_o, wide_corridor, False)
    if key == "freewheel_idle":
        return PolicyConfig(key, e.omega_o if e.omega_o > 0 else 500 * 2 * math.pi / 60, wide_corridor, True)
    if key == "freewheel_off":
        return PolicyConfig(key, 0.0, wide_corridor, True)
    raise ValueError(f"unknown policy {name!r}; valid: {', '.join(n.replace('_', '-') for n in POLICY_NAMES)}")


def beta_g(e: EngineParams) -> float:
    """Cost (J) charged per engage or disengage: half the rotational-energy gap."""
    return 0.5 * e.J_e * (e.omega_c**2 - e.omega_o**2) / 2.0


@dataclass(eq=False)
class OcpInstance:
    qp: QpProblem
    bool_idx: np.ndarray
    N: int
    delta_s: float
    K: np.ndarray  # variable indices, length N+1
    F_t: np.ndarray
    F_b: np.ndarray
    z: np.ndarray
    u: np.ndarray | None
    delta: np.ndarray
    x_scale: np.ndarray
    coeffs: TaylorCoeffs
    A: float
    B: float
    w: np.ndarray
    drag_lo: np.ndarray  # bounds of F_dc over the corridor (McCormick L/U)
    drag_hi: np.ndarray
    drag_power_closed: float
    drag_power_open: float
    beta_g: float
    beta_t: float
    z_prev: int
    mode: str
    meta: dict = field(default_factory=dict)

    @property
    def n_cont(self) -> int:
        return self.qp.n - len(self.bool_idx)

    def unpack(self, x) -> dict:
        out = {name: x[getattr(self, name)] for name in ("K", "F_t", "F_b", "z", "delta")}
        if self.u is not None:
            out["u"] = x[self.u]
        else:
            out["u"] = out["z"] * self.drag_power_closed * self.coeffs.varphi0
        return out

    def drag_closed(self, K) -> np.ndarray:
        """Affine drag model F_dc,j(K_j) of the controller."""
        return self.drag_power_closed * (self.coeffs.phi0 + self.coeffs.phi1 * K)

    def fix_booleans(self, z) -> QpProblem:
        """The convex QP with every z fixed to the given 0/1 pattern."""
        lb = self.qp.lb.copy()
        ub = self.qp.ub.copy()
        lb[self.z] = ub[self.z] = z
        return self.qp.with_bounds(lb, ub)


def build_instance(
    K_init: float,
    z_prev: int,
    alpha: np.ndarray,
    K_l: np.ndarray,
    K_u: np.ndarray,
    K_r: np.ndarray,
    p: VehicleParams,
    e: EngineParams,
    policy: PolicyConfig,
    beta_t: float,
    delta_s: float,
    mode: str = MCCORMICK,
) -> OcpInstance:
    """Assemble the horizon problem.

    alpha: slope per step (length N); K_l, K_u: corridor at steps 0..N
    (index 0 is ignored, the initial state is given); K_r: linearization
    reference for steps 0..N-1 (an extra trailing entry is ignored).
    """
    alpha = np.asarray(alpha, dtype=float)
    N = len(alpha)
    if N < 2:
        raise ValueError(f"horizon must have at least 2 steps, got {N}")
    K_l = np.asarray(K_l, dtype=float)
    K_u = np.asarray(K_u, dtype=float)
    if len(K_l) != N + 1 or len(K_u) != N + 1:
        raise ValueError("corridor slices must have N+1 entries")
    bad = np.flatnonzero(K_l[1:] > K_u[1:])
    if len(bad):
        raise InfeasibleInstance(f"empty corridor at horizon step {bad[0] + 1}")
    if not K_init > 0:
        raise ValueError("initial kinetic energy must be > 0")
    if mode not in (MCCORMICK, FROZEN):
        raise ValueError(f"unknown drag mode {mode!r}")
    K_r = np.asarray(K_r, dtype=float)[:N]
    if len(K_r) != N:
        raise ValueError("reference trajectory too short")

    e_pol = policy.engine(e)
    coeffs = taylor_coeffs(K_r, p.m)
    A, B, _ = discretize(0.0, delta_s, p)
    w = np.array([discretize(a, delta_s, p)[2] for a in alpha])
    P_c = e.omega_c * drag_torque(e.omega_c, e)
    P_o = e_pol.omega_o * drag_torque(e_pol.omega_o, e_pol)
    bg = beta_g(e_pol) if policy.freewheel else 0.0

    use_u = mode == MCCORMICK
    per = 6 if use_u else 5
    n = per * N + 1
    j = np.arange(N)
    iK = np.append(per * j, per * N)
    iFt = per * j + 1
    iFb = per * j + 2
    iz = per * j + 3
    iu = per * j + 4 if use_u else None
    idl = per * j + per - 1

    # McCormick bounds of the affine drag over the admissible K range
    K_lo = K_l.copy()
    K_hi = K_u.copy()
    K_lo[0] = K_hi[0] = K_init
    drag_hi = P_c * (coeffs.phi0 + coeffs.phi1 * K_lo[:N])
    drag_lo = P_c * (coeffs.phi0 + coeffs.phi1 * K_hi[:N])

    # cost
    c = np.zeros(n)
    c0 = 0.0
    c[iFt] = delta_s
    idle = delta_s * P_o * coeffs.varphi0
    c0 += idle.sum()
    c[iz] -= idle
    c[idl] = bg
    c0 += beta_t * delta_s * coeffs.theta0.sum()
    c[iK[:N]] += beta_t * delta_s * coeffs.theta1
    c[iK[N]] -= 1.0
    Q = sp.csr_matrix((2 * beta_t * delta_s * coeffs.theta2, (iK[:N], iK[:N])), shape=(n, n))

    # dynamics
    rows, cols, vals = [], [], []

    def add(r, cidx, v):
        rows.append(np.broadcast_to(r, np.shape(cidx)).ravel() if np.ndim(cidx) else [r])
        cols.append(np.ravel(cidx))
        vals.append(np.broadcast_to(v, np.shape(cidx)).ravel() if np.ndim(cidx) else [v])

    add(j, iK[1:], 1.0)
    add(j, iK[:N], -A)
    add(j, iFt, -B)
    add(j, iFb, -B)
    if use_u:
        add(j, iu, B)
    else:
        add(j, iz, B * P_c * coeffs.varphi0)
    E = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, n)
    )
    d = w.copy()

    # inequalities
    rows, cols, vals, h = [], [], [], []
    r0 = 0

    def block(cidx_list, v_list, rhs):
        nonlocal r0
        r = r0 + j
        for cidx, v in zip(cidx_list, v_list):
            rows.append(r)
            cols.append(cidx)
            vals.append(np.broadcast_to(v, (N,)).astype(float))
        h.append(np.broadcast_to(rhs, (N,)).astype(float))
        r0 += N

    # tractive power, linearized 1/v
    block([iFt, iK[:N]], [1.0, -p.P_max * coeffs.phi1], p.P_max * coeffs.phi0)
    # tractive force only with the powertrain closed
    block([iFt, iz], [1.0, -p.F_t_max], 0.0)
    # gear-change indicator; step 0 compares against the last applied state
    zm1 = np.append(-1, iz[:-1])  # -1 marks the constant z_prev
    prev_rhs = np.zeros(N)
    prev_rhs[0] = z_prev
    for sign in (1.0, -1.0):
        r = r0 + j
        rows += [r, r[1:]]
        cols += [iz, zm1[1:]]
        vals += [np.full(N, sign), np.full(N - 1, -sign)]
        rows.append(r)
        cols.append(idl)
        vals.append(np.full(N, -1.0))
        h.append(sign * prev_rhs)
        r0 += N
    if use_u:
        cdk = P_c * coeffs.phi1
        cd0 = P_c * coeffs.phi0
        block([iz, iu], [drag_lo, -1.0], 0.0)
        block([iu, iz], [1.0, -drag_hi], 0.0)
        block([iK[:N], iz, iu], [cdk, drag_hi, -1.0], drag_hi - cd0)
        block([iu, iK[:N], iz], [1.0, -cdk, -drag_lo], cd0 - drag_lo)
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, n)
    )
    h = np.concatenate(h)

    # bounds
    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb[iK] = K_l
    ub[iK] = K_u
    lb[iK[0]] = ub[iK[0]] = K_init
    lb[iFt], ub[iFt] = 0.0, p.F_t_max
    lb[iFb], ub[iFb] = -p.F_b_max, 0.0
    lb[idl], ub[idl] = 0.0, 1.0
    if policy.freewheel:
        lb[iz], ub[iz] = 0.0, 1.0
        bool_idx = iz.copy()
    else:
        lb[iz] = ub[iz] = 1.0
        bool_idx = np.zeros(0, dtype=int)
    if use_u:
        lb[iu] = np.minimum(0.0, drag_lo)
        ub[iu] = np.maximum(0.0, drag_hi)

    x_scale = np.ones(n)
    x_scale[iK] = np.maximum(K_u, K_init)
    x_scale[iFt] = p.F_t_max
    x_scale[iFb] = p.F_b_max
    if use_u:
        x_scale[iu] = np.maximum(np.abs(drag_hi), 1.0)

    qp = QpProblem(Q, c, E, d, G, h, lb, ub, c0)
    return OcpInstance(
        qp=qp, bool_idx=bool_idx, N=N, delta_s=delta_s, K=iK, F_t=iFt, F_b=iFb, z=iz, u=iu,
        delta=idl, x_scale=x_scale, coeffs=coeffs, A=A, B=B, w=w, drag_lo=drag_lo, drag_hi=drag_hi,
        drag_power_closed=P_c, drag_power_open=P_o, beta_g=bg, beta_t=beta_t, z_prev=int(z_prev),
        mode=mode,
    )


def dump_instance(inst: OcpInstance, path) -> None:
    """Write the QP data as sparse triplets for offline debugging.

    Layout: a line ``n m_eq m_ineq n_bool c0`` followed by sections introduced
    by a name line (``Q``, ``E``, ``G`` hold ``row col value`` triplets; ``c``,
    ``d``, ``h``, ``lb``, ``ub`` hold ``index value``; ``bool`` holds indices).
    Sections end with a line ``end``.
    """
    qp = inst.qp
    with Path(path).open("w") as fh:
        fh.write(f"{qp.n} {len(qp.d)} {len(qp.h)} {len(inst.bool_idx)} {float(qp.c0)!r}\n")
        for name in ("Q", "E", "G"):
            M = getattr(qp, name).tocoo()
            fh.write(f"{name}\n")
            for r, cidx, v in zip(M.row, M.col, M.data):
                fh.write(f"{r} {cidx} {float(v)!r}\n")
            fh.write("end\n")
        for name in ("c", "d", "h", "lb", "ub"):
            fh.write(f"{name}\n")
            for i, v in enumerate(getattr(qp, name)):
                fh.write(f"{i} {float(v)!r}\n")
            fh.write("end\n")
        fh.write("bool\n")
        for i in inst.bool_idx:
            fh.write(f"{i}\n")
        fh.write("end\n")


def load_dump(path) -> tuple[QpProblem, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    n, m_eq, m_in, _, c0 = lines[0].split()
    n, m_eq, m_in = int(n), int(m_eq), int(m_in)
    sections = {}
    i = 1
    while i < len(lines):
        name = lines[i]
        i += 1
        body = []
        while lines[i] != "end":
            body.append(lines[i].split())
            i += 1
        i += 1
        sections[name] = body
    shapes = {"Q": (n, n), "E": (m_eq, n), "G": (m_in, n)}
    mats = {}
    for name, shape in shapes.items():
        t = sections[name]
        r = [int(a[0]) for a in t]
        cidx = [int(a[1]) for a in t]
        v = [float(a[2]) for a in t]
        mats[name] = sp.csr_matrix((v, (r, cidx)), shape=shape)
    vecs = {}
    for name, size in (("c", n), ("d", m_eq), ("h", m_in), ("lb", n), ("ub", n)):
        v = np.zeros(size)
        for a in sections[name]:
            v[int(a[0])] = float(a[1])
        vecs[name] = v
    bools = np.array([int(a[0]) for a in sections["bool"]], dtype=int)
    qp = QpProblem(mats["Q"], vecs["c"], mats["E"], vecs["d"], mats["G"], vecs["h"], vecs["lb"], vecs["ub"], float(c0))
    return qp, bools
