"""Convex QP core.

Problems have the form

    min  1/2 x'Qx + c'x + c0
    s.t. E x = d,  G x <= h,  lb <= x <= ub

with Q symmetric positive semidefinite. The default backend is the Clarabel
interior-point solver; this module adds variable/row scaling, removal of
fixed variables, an active-set polishing pass, and KKT residuals measured on
the original (unscaled) data, which define the `optimal` status.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


def _csr(M, n_cols):
    if M is None:
        return sp.csr_matrix((0, n_cols))
    if isinstance(M, sp.csr_matrix) and M.dtype == np.float64:
        return M
    return sp.csr_matrix(M, dtype=float)


@dataclass(eq=False)
class QpProblem:
    Q: sp.spmatrix
    c: np.ndarray
    E: sp.spmatrix | None = None
    d: np.ndarray | None = None
    G: sp.spmatrix | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    c0: float = 0.0
    # scaled constraint data shared by every copy that differs only in bounds
    _prep: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = len(self.c)
        self.Q = _csr(self.Q, n)
        self.E = _csr(self.E, n)
        self.G = _csr(self.G, n)
        self.d = np.zeros(0) if self.d is None else np.asarray(self.d, dtype=float)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.E.shape != (len(self.d), n) or self.G.shape != (len(self.h), n):
            raise ValueError("constraint matrices and right-hand sides disagree in shape")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must have one entry per variable")

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.c0)

    def with_bounds(self, lb, ub) -> "QpProblem":
        return replace(self, lb=np.asarray(lb, dtype=float), ub=np.asarray(ub, dtype=float), _prep=self._prep)


@dataclass
class KktResiduals:
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)


@dataclass(eq=False)
class QpSolution:
    x: np.ndarray | None
    objective: float
    status: str
    kkt: KktResiduals | None = None
    y: np.ndarray | None = None  # equality multipliers
    lam: np.ndarray | None = None  # inequality multipliers (>= 0)
    lam_lb: np.ndarray | None = None
    lam_ub: np.ndarray | None = None
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(prob: QpProblem, x, y, lam, lam_lb, lam_ub) -> KktResiduals:
    """Relative KKT residuals (infinity norms, each scaled by 1 + the largest term)."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _kkt_residuals(prob, x, y, lam, lam_lb, lam_ub)


def _kkt_residuals(prob, x, y, lam, lam_lb, lam_ub) -> KktResiduals:
    Qx = prob.Q @ x
    Ety = prob.E.T @ y if len(y) else np.zeros_like(x)
    Gtl = prob.G.T @ lam if len(lam) else np.zeros_like(x)
    bnd = lam_ub - lam_lb
    grad = Qx + prob.c + Ety + Gtl + bnd
    scale = 1.0 + max(_inf(Qx), _inf(prob.c), _inf(Ety), _inf(Gtl), _inf(bnd))
    stat = _inf(grad) / scale

    Ex = prob.E @ x
    Gx = prob.G @ x
    fin_lb = np.isfinite(prob.lb)
    fin_ub = np.isfinite(prob.ub)
    viol = max(
        _inf(Ex - prob.d),
        _inf(np.maximum(Gx - prob.h, 0.0)),
        _inf(np.maximum(prob.lb[fin_lb] - x[fin_lb], 0.0)),
        _inf(np.maximum(x[fin_ub] - prob.ub[fin_ub], 0.0)),
    )
    fscale = 1.0 + max(_inf(prob.d), _inf(prob.h), _inf(Ex), _inf(Gx), _inf(x))
    feas = viol / fscale

    dual_neg = max(_inf(np.minimum(lam, 0.0)), _inf(np.minimum(lam_lb, 0.0)), _inf(np.minimum(lam_ub, 0.0)))
    comp = max(
        _inf(lam * np.abs(prob.h - Gx)),
        _inf(lam_lb[fin_lb] * np.abs(x[fin_lb] - prob.lb[fin_lb])),
        _inf(lam_ub[fin_ub] * np.abs(prob.ub[fin_ub] - x[fin_ub])),
    )
    # sum of absolute objective terms: the signed objective can nearly cancel
    ax = np.abs(x)
    cscale = 1.0 + 0.5 * ax @ (abs(prob.Q) @ ax) + np.abs(prob.c) @ ax
    comp = max(comp / cscale, dual_neg / scale)
    return KktResiduals(stat, feas, comp)


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


# ---------------------------------------------------------------------------
# backend


@dataclass
class BackendResult:
    status: str  # optimal / infeasible / max_iter
    x: np.ndarray | None
    z: np.ndarray | None  # multipliers of all rows, equality rows first
    iterations: int = 0


# signature: (P_upper, q, A, b, n_eq) -> BackendResult for
#   min 1/2 x'Px + q'x  s.t.  A[:n_eq] x = b[:n_eq],  A[n_eq:] x <= b[n_eq:]
Backend = Callable[[sp.csc_matrix, np.ndarray, sp.csc_matrix, np.ndarray, int], BackendResult]


def clarabel_backend(P, q, A, b, n_eq, *, tol=1e-10, max_iter=200) -> BackendResult:
    import clarabel

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = tol
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.presolve_enable = False
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if A.shape[0] - n_eq:
        cones.append(clarabel.NonnegativeConeT(A.shape[0] - n_eq))
    if not cones:
        # unconstrained: a single always-satisfied row keeps the solver happy
        A = sp.csc_matrix((1, len(q)))
        b = np.ones(1)
        cones = [clarabel.NonnegativeConeT(1)]
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    res = solver.solve()
    status = str(res.status)
    if status in ("Solved", "AlmostSolved", "MaxIterations", "MaxTime", "InsufficientProgress",
                  "NumericalError", "AlmostDualInfeasible", "DualInfeasible"):
        x = np.array(res.x)
        z = np.array(res.z)
        if not np.all(np.isfinite(x)):
            return BackendResult(MAX_ITER, None, None, res.iterations)
        code = OPTIMAL if status in ("Solved", "AlmostSolved") else MAX_ITER
        return BackendResult(code, x, z, res.iterations)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return BackendResult(INFEASIBLE, None, None, res.iterations)
    return BackendResult(MAX_ITER, None, None, res.iterations)


_default_backend: Backend = clarabel_backend


def _tight_clarabel(P, q, A, b, n_eq):
    return clarabel_backend(P, q, A, b, n_eq, tol=1e-13, max_iter=400)


def set_default_backend(backend: Backend) -> None:
    global _default_backend
    _default_backend = backend


# ---------------------------------------------------------------------------
# driver


def _fix_tol(lb, ub):
    return ub - lb <= 1e-12 * (1.0 + np.abs(lb))


def _prepare(prob: QpProblem, D: np.ndarray) -> dict:
    """Column-scaled Q and [E; G] in COO form plus row scale factors."""
    key = D.tobytes()
    cached = prob._prep.get("key")
    if cached == key:
        return prob._prep
    Dm = sp.diags(D)
    A = sp.vstack([prob.E, prob.G], format="csr")
    A_s = (A @ Dm).tocsr()
    rn = np.asarray(abs(A_s).max(axis=1).todense()).ravel() if A_s.shape[0] else np.zeros(0)
    rn = np.where(rn > 0, rn, 1.0)
    A_s = (sp.diags(1.0 / rn) @ A_s).tocoo()
    Q_s = sp.triu(Dm @ prob.Q @ Dm).tocoo()
    prob._prep.clear()
    prob._prep.update(
        key=key, A_row=A_s.row, A_col=A_s.col, A_val=A_s.data, rn=rn,
        Q_row=Q_s.row, Q_col=Q_s.col, Q_val=Q_s.data,
        Q_max=float(np.max(np.abs(Q_s.data))) if Q_s.nnz else 0.0,
    )
    return prob._prep


def solve_qp(
    prob: QpProblem,
    warm_start: QpSolution | None = None,
    tol: float = 1e-8,
    backend: Backend | None = None,
    x_scale: np.ndarray | None = None,
    polish: bool = True,
) -> QpSolution:
    """Solve a convex QP; `status == "optimal"` guarantees relative KKT residuals < tol.

    `warm_start` is accepted for interface compatibility; the interior-point
    backend starts from its own central point.
    `x_scale` gives typical variable magnitudes; by default they are taken
    from the finite bounds.
    """
    backend = backend or _default_backend
    n = prob.n
    lb, ub = prob.lb, prob.ub
    if np.any(lb > ub + 1e-12 * (1 + np.abs(lb))):
        return QpSolution(None, np.inf, INFEASIBLE, info={"reason": "empty bounds"})

    if x_scale is None:
        mag = np.maximum(np.where(np.isfinite(lb), np.abs(lb), 0), np.where(np.isfinite(ub), np.abs(ub), 0))
        D = np.where(mag > 0, mag, 1.0)
    else:
        D = np.asarray(x_scale, dtype=float)
    prep = _prepare(prob, D)

    fixed = _fix_tol(lb, ub) & np.isfinite(lb)
    free = np.flatnonzero(~fixed)
    nf = len(free)
    x_fix = np.where(fixed, lb, 0.0)
    colmap = np.full(n, -1)
    colmap[free] = np.arange(nf)

    m_eq = len(prob.d)
    rn = prep["rn"]
    rhs = np.concatenate([prob.d, prob.h])
    if fixed.any():
        rhs = rhs - np.concatenate([prob.E @ x_fix, prob.G @ x_fix])
    rhs_s = rhs / rn

    keep = colmap[prep["A_col"]] >= 0
    a_row = prep["A_row"][keep]
    a_col = colmap[prep["A_col"][keep]]
    a_val = prep["A_val"][keep]
    row_used = np.zeros(len(rn), dtype=bool)
    row_used[a_row] = True
    # rows left without free variables must already hold
    ftol = 1e-9 * (1.0 + _inf(rhs))
    empty = ~row_used
    if np.any(np.abs(rhs[:m_eq][empty[:m_eq]]) > ftol) or np.any(rhs[m_eq:][empty[m_eq:]] < -ftol):
        return QpSolution(None, np.inf, INFEASIBLE, info={"reason": "fixed variables violate a row"})
    e_keep = np.flatnonzero(row_used[:m_eq])
    g_keep = np.flatnonzero(row_used[m_eq:])
    rowmap = np.full(len(rn), -1)
    used = np.concatenate([e_keep, m_eq + g_keep])
    rowmap[used] = np.arange(len(used))
    n_eq = len(e_keep)

    lb_f, ub_f = lb[free], ub[free]
    has_lb = np.flatnonzero(np.isfinite(lb_f))
    has_ub = np.flatnonzero(np.isfinite(ub_f))
    r0 = len(used)
    rows = np.concatenate([rowmap[a_row], r0 + np.arange(len(has_lb)), r0 + len(has_lb) + np.arange(len(has_ub))])
    cols = np.concatenate([a_col, has_lb, has_ub])
    vals = np.concatenate([a_val, -np.ones(len(has_lb)), np.ones(len(has_ub))])
    m_tot = r0 + len(has_lb) + len(has_ub)
    A_s = sp.csc_matrix((vals, (rows, cols)), shape=(m_tot, nf))
    Df = D[free]
    b_s = np.concatenate([rhs_s[used], -lb_f[has_lb] / Df[has_lb], ub_f[has_ub] / Df[has_ub]])

    qk = (colmap[prep["Q_row"]] >= 0) & (colmap[prep["Q_col"]] >= 0)
    # Q restricted to free variables, upper triangle, scaled
    c_full = prob.c + (prob.Q @ x_fix if fixed.any() else 0.0)
    q_s = Df * c_full[free]
    sigma = 1.0 / max(1.0, _inf(q_s), prep["Q_max"])
    P_s = sp.csc_matrix(
        (sigma * prep["Q_val"][qk], (colmap[prep["Q_row"][qk]], colmap[prep["Q_col"][qk]])), shape=(nf, nf)
    )

    row_scale = np.concatenate([rn[used], Df[has_lb], Df[has_ub]])

    def run(be):
        r = be(P_s, sigma * q_s, A_s, b_s, n_eq)
        if r.x is None:
            return r, None
        z = r.z / row_scale / sigma
        parts = _expand(prob, free, x_fix, Df * r.x, z, e_keep, g_keep, has_lb, has_ub, n_eq)
        x, y, lam, lam_lb, lam_ub = parts
        lam_lb, lam_ub = _fixed_multipliers(prob, fixed, x, y, lam, lam_lb, lam_ub)
        parts = (x, y, lam, lam_lb, lam_ub)
        return r, (parts, kkt_residuals(prob, *parts))

    res, out = run(backend)
    if out is not None and out[1].max() >= tol and backend is clarabel_backend:
        # degenerate vertices sometimes stop just short; a tighter pass is cheap
        res2, out2 = run(_tight_clarabel)
        if out2 is not None and out2[1].max() < out[1].max():
            res, out = res2, out2
    if out is None:
        status = INFEASIBLE if res.status == INFEASIBLE else MAX_ITER
        return QpSolution(None, np.inf, status, iterations=res.iterations)
    (x, y, lam, lam_lb, lam_ub), kkt = out

    if polish and kkt.max() >= tol:
        polished = _polish(prob, x, lam, lam_lb, lam_ub, fixed)
        if polished is not None:
            kkt_p = kkt_residuals(prob, *polished)
            if kkt_p.max() < kkt.max():
                x, y, lam, lam_lb, lam_ub = polished
                kkt = kkt_p

    status = OPTIMAL if kkt.max() < tol else MAX_ITER
    return QpSolution(x, prob.objective(x), status, kkt, y, lam, lam_lb, lam_ub, res.iterations)


def _expand(prob, free, x_fix, x_f, z, e_keep, g_keep, has_lb, has_ub, n_eq):
    n = prob.n
    x = x_fix.copy()
    x[free] = x_f
    y = np.zeros(len(prob.d))
    lam = np.zeros(len(prob.h))
    lam_lb = np.zeros(n)
    lam_ub = np.zeros(n)
    o = 0
    y[e_keep] = z[o : o + n_eq]
    o += n_eq
    lam[g_keep] = np.maximum(z[o : o + len(g_keep)], 0.0)
    o += len(g_keep)
    lam_lb[free[has_lb]] = np.maximum(z[o : o + len(has_lb)], 0.0)
    o += len(has_lb)
    lam_ub[free[has_ub]] = np.maximum(z[o : o + len(has_ub)], 0.0)
    return x, y, lam, lam_lb, lam_ub


def _fixed_multipliers(prob, fixed, x, y, lam, lam_lb, lam_ub):
    # fixed variables carry the whole gradient in their bound multiplier
    if not fixed.any():
        return lam_lb, lam_ub
    g = prob.Q @ x + prob.c + prob.E.T @ y + prob.G.T @ lam
    gf = g[fixed]
    lam_lb = lam_lb.copy()
    lam_ub = lam_ub.copy()
    lam_lb[fixed] = np.maximum(gf, 0.0)
    lam_ub[fixed] = np.maximum(-gf, 0.0)
    return lam_lb, lam_ub


def _polish(prob: QpProblem, x, lam, lam_lb, lam_ub, fixed):
    """Re-solve the equality-constrained QP on the guessed active set."""
    if not np.all(np.isfinite(x)):
        return None
    n = prob.n
    Gx = prob.G @ x
    slack = prob.h - Gx
    act_g = np.flatnonzero(lam > np.maximum(slack, 0.0))
    act_lb = np.flatnonzero(((lam_lb > np.maximum(x - prob.lb, 0.0)) | fixed) & np.isfinite(prob.lb))
    act_ub = np.flatnonzero((lam_ub > np.maximum(prob.ub - x, 0.0)) & np.isfinite(prob.ub) & ~fixed)
    act_ub = np.setdiff1d(act_ub, act_lb)
    I = sp.identity(n, format="csr")
    A = sp.vstack([prob.E, prob.G[act_g], I[act_lb], I[act_ub]], format="csc")
    b = np.concatenate([prob.d, prob.h[act_g], prob.lb[act_lb], prob.ub[act_ub]])
    m = A.shape[0]
    # scale columns and rows to make the KKT system well conditioned
    mag = np.maximum(np.abs(x), 1.0)
    Dm = sp.diags(mag)
    A_s = (A @ Dm).tocsr()
    rn = np.asarray(abs(A_s).max(axis=1).todense()).ravel() if m else np.zeros(0)
    rn = np.where(rn > 0, rn, 1.0)
    A_s = sp.diags(1.0 / rn) @ A_s
    b_s = b / rn
    Q_s = Dm @ prob.Q @ Dm
    q_s = mag * prob.c
    qn = max(1.0, _inf(q_s), abs(Q_s).max() if Q_s.nnz else 0.0)
    if not np.isfinite(qn):
        return None  # diverged iterate, e.g. from an infeasible node
    Q_s = Q_s / qn
    q_s = q_s / qn
    delta = 1e-11
    K = sp.bmat([[Q_s + delta * sp.identity(n), A_s.T], [A_s, -delta * sp.identity(m)]], format="csc")
    K0 = sp.bmat([[Q_s, A_s.T], [A_s, None]], format="csc") if m else Q_s.tocsc()
    rhs = np.concatenate([-q_s, b_s])
    try:
        lu = spla.splu(K)
        sol = lu.solve(rhs)
        for _ in range(5):
            r = rhs - K0 @ sol
            sol = sol + lu.solve(r)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    xs = mag * sol[:n]
    mult = sol[n:] / rn * qn
    k0 = len(prob.d)
    k1 = k0 + len(act_g)
    k2 = k1 + len(act_lb)
    y = mult[:k0]
    lam_p = np.zeros(len(prob.h))
    lam_p[act_g] = mult[k0:k1]
    lam_lb_p = np.zeros(n)
    lam_ub_p = np.zeros(n)
    # A has +I rows for both bound kinds: a negative multiplier on a lower-bound row is a lb multiplier
    lam_lb_p[act_lb] = -mult[k1:k2]
    lam_ub_p[act_ub] = mult[k2:]
    free_lb = act_lb[~fixed[act_lb]]
    if np.any(lam_p < -1e-9 * (1 + _inf(lam_p))) or np.any(lam_lb_p[free_lb] < -1e-9 * (1 + _inf(lam_lb_p))) \
            or np.any(lam_ub_p < -1e-9 * (1 + _inf(lam_ub_p))):
        return None
    # fixed variables: split the single multiplier into lb/ub parts
    fx = act_lb[fixed[act_lb]]
    v = lam_lb_p[fx]
    lam_lb_p[fx] = np.maximum(v, 0.0)
    lam_ub_p[fx] = np.maximum(-v, 0.0)
    return xs, y, np.maximum(lam_p, 0.0), np.maximum(lam_lb_p, 0.0), lam_ub_p
