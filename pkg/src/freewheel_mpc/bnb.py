"""Branch-and-bound over the Boolean powertrain variables.

Each node is the continuous relaxation (z in [0, 1]) with some z fixed.
Nodes are explored best-bound-first; branching picks the most fractional z
(lowest index on ties), so a single-worker run is fully deterministic.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .ocp import OcpInstance
from .qp import INFEASIBLE, OPTIMAL, QpSolution, solve_qp

log = logging.getLogger(__name__)

BNB_OPTIMAL = "optimal"
GAP_LIMIT = "gap_limit"
NODE_LIMIT = "node_limit"
BNB_INFEASIBLE = "infeasible"

# a fixed-pattern solve that misses the strict KKT tolerance is still used as
# an incumbent when its residuals are below this
ACCEPTABLE_KKT = 1e-6


def _usable(sol: QpSolution) -> bool:
    if sol.status == OPTIMAL:
        return True
    if sol.x is not None and sol.kkt is not None and sol.kkt.max() < ACCEPTABLE_KKT:
        log.info("accepting QP point with KKT residual %.2g", sol.kkt.max())
        return True
    return False


@dataclass
class BnbLimits:
    node_limit: int = 100_000
    time_limit: float | None = None  # s
    rel_gap: float = 0.0  # stop early once gap <= rel_gap*|incumbent|
    abs_gap_rel: float = 1e-6
    abs_gap_abs: float = 1e-3  # J
    int_tol: float = 1e-6
    local_search: int = 0  # rounds of switch-point search on the incumbent

    def abs_gap(self, incumbent: float) -> float:
        return self.abs_gap_rel * abs(incumbent) + self.abs_gap_abs


@dataclass(eq=False)
class BnbReport:
    incumbent: QpSolution | None
    z: np.ndarray | None
    nodes_explored: int
    best_bound: float
    gap: float
    status: str
    qp_solves: int = 0
    bound_history: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.incumbent.objective if self.incumbent is not None else np.inf

    def log_line(self) -> str:
        return (f"nodes={self.nodes_explored} qps={self.qp_solves} bound={self.best_bound:.6g} "
                f"incumbent={self.objective:.6g} gap={self.gap:.3g} status={self.status}")


class _Search:
    def __init__(self, inst: OcpInstance, limits: BnbLimits):
        self.inst = inst
        self.limits = limits
        self.best: QpSolution | None = None
        self.best_z: np.ndarray | None = None
        self.qp_solves = 0
        self.seen: dict[bytes, float] = {}

    def solve(self, prob, warm=None) -> QpSolution:
        self.qp_solves += 1
        return solve_qp(prob, warm_start=warm, x_scale=self.inst.x_scale)

    def try_pattern(self, z) -> float:
        """Evaluate a full 0/1 pattern; update the incumbent. Returns its objective."""
        z = np.asarray(np.round(z), dtype=float)
        key = z.astype(np.int8).tobytes()
        if key in self.seen:
            return self.seen[key]
        sol = self.solve(self.inst.fix_booleans(z))
        f = sol.objective if _usable(sol) else np.inf
        self.seen[key] = f
        if f < self.objective:
            self.best, self.best_z = sol, z
        return f

    @property
    def objective(self) -> float:
        return self.best.objective if self.best is not None else np.inf


def _relaxation(inst: OcpInstance, lb_z, ub_z):
    lb = inst.qp.lb.copy()
    ub = inst.qp.ub.copy()
    lb[inst.z] = lb_z
    ub[inst.z] = ub_z
    return inst.qp.with_bounds(lb, ub)


def switch_neighbours(z: np.ndarray, max_shift: int = 2):
    """Patterns reachable by moving one switch point, deleting one run, or
    opening a glide inside a long closed run."""
    z = np.asarray(z, dtype=int)
    n = len(z)
    sw = np.flatnonzero(np.diff(z) != 0) + 1  # z[i] != z[i-1]
    out = []
    for i in sw:
        for k in range(1, max_shift + 1):
            # move the switch earlier: positions i-k..i-1 take z[i]
            if i - k >= 0:
                y = z.copy()
                y[i - k : i] = z[i]
                out.append(y)
            # move it later: positions i..i+k-1 take z[i-1]
            if i + k <= n:
                y = z.copy()
                y[i : i + k] = z[i - 1]
                out.append(y)
    # remove a whole run (merge with its neighbours)
    bounds = np.concatenate(([0], sw, [n]))
    for a, b in zip(bounds[:-1], bounds[1:]):
        y = z.copy()
        y[a:b] = 1 - z[a]
        out.append(y)
        # open a glide inside a long closed run, after a short pulse
        if z[a] == 1 and b - a >= 6:
            pulse = max(1, (b - a) // 8)
            for end in (a + (b - a) // 2, b - pulse):
                y = z.copy()
                y[a + pulse : end] = 0
                out.append(y)
    return out


def sum_up_rounding(zr: np.ndarray) -> np.ndarray:
    """Round so the running sum of the pattern tracks the running sum of zr."""
    out = np.zeros(len(zr))
    acc = 0.0
    for j, v in enumerate(zr):
        acc += v
        if acc - out[:j].sum() >= 0.5:
            out[j] = 1.0
    return out


def glide_patterns(n: int) -> list:
    """Closed powertrain with one open run at the head or tail of the horizon."""
    out = []
    for frac in (0.25, 0.5, 0.75):
        k = max(1, int(round(frac * n)))
        head, tail = np.ones(n), np.ones(n)
        head[:k] = 0.0
        tail[n - k:] = 0.0
        out += [head, tail]
    return out


def local_search(search: _Search, rounds: int, deadline=None) -> None:
    for _ in range(rounds):
        if search.best_z is None:
            return
        start = search.objective
        for y in switch_neighbours(search.best_z):
            if deadline is not None and time.monotonic() > deadline:
                return
            search.try_pattern(y)
        if not search.objective < start:
            return


def solve_miqp(
    inst: OcpInstance,
    limits: BnbLimits | None = None,
    initial_patterns: Iterable[np.ndarray] = (),
) -> BnbReport:
    """Branch-and-bound on the z variables of `inst`.

    `initial_patterns` are full 0/1 z-vectors evaluated first to seed the
    incumbent (e.g. the previous MPC solution shifted by one step).
    """
    limits = limits or BnbLimits()
    start_time = time.monotonic()
    deadline = start_time + limits.time_limit if limits.time_limit else None

    if len(inst.bool_idx) == 0:
        sol = solve_qp(inst.qp, x_scale=inst.x_scale)
        if sol.status == INFEASIBLE:
            return BnbReport(None, None, 1, np.inf, np.inf, BNB_INFEASIBLE, 1)
        if not _usable(sol):
            return BnbReport(None, None, 1, -np.inf, np.inf, NODE_LIMIT, 1)
        z = sol.x[inst.z]
        return BnbReport(sol, z, 1, sol.objective, 0.0, BNB_OPTIMAL, 1, [sol.objective])

    search = _Search(inst, limits)
    nz = len(inst.z)
    for pat in initial_patterns:
        search.try_pattern(pat)

    root = search.solve(_relaxation(inst, np.zeros(nz), np.ones(nz)))
    nodes = 1
    if root.status == INFEASIBLE:
        return BnbReport(search.best, search.best_z, nodes, np.inf, np.inf,
                         BNB_INFEASIBLE if search.best is None else NODE_LIMIT, search.qp_solves)
    if root.x is None:
        # no usable relaxation point: only the seeded patterns can be offered
        log.warning("root relaxation failed (%s)", root.status)
        return BnbReport(search.best, search.best_z, nodes, -np.inf, np.inf, NODE_LIMIT, search.qp_solves)
    if root.status != OPTIMAL:
        log.warning("root relaxation not solved to tolerance (%s)", root.status)

    # rounding of the root relaxation as a cheap primal heuristic
    zr = root.x[inst.z]
    search.try_pattern(zr > limits.int_tol)
    search.try_pattern(zr >= 0.5)
    # weak relaxations spread a little z everywhere; these recover glide structure
    search.try_pattern(sum_up_rounding(zr))
    for pat in glide_patterns(nz):
        search.try_pattern(pat)
    local_search(search, limits.local_search, deadline)

    counter = 0
    heap: list = []

    def push(sol, lb_z, ub_z):
        nonlocal counter
        heapq.heappush(heap, (sol.objective, counter, lb_z, ub_z, sol))
        counter += 1

    push(root, np.zeros(nz), np.ones(nz))
    history = []
    status = BNB_OPTIMAL

    while heap:
        history.append(heap[0][0])
        inc = search.objective
        gap_tol = limits.abs_gap(inc) if np.isfinite(inc) else 0.0
        if heap[0][0] >= inc - gap_tol:
            break
        if limits.rel_gap > 0 and inc - heap[0][0] <= limits.rel_gap * abs(inc):
            status = GAP_LIMIT
            break
        if nodes >= limits.node_limit or (deadline is not None and time.monotonic() > deadline):
            status = NODE_LIMIT
            break
        _, _, lb_z, ub_z, sol = heapq.heappop(heap)
        zv = sol.x[inst.z]
        frac = np.where(lb_z < ub_z, np.minimum(zv, 1.0 - zv), -1.0)
        k = int(np.argmax(frac))
        if frac[k] <= limits.int_tol:
            # integral relaxation: re-solve with z fixed exactly for a clean incumbent
            search.try_pattern(zv)
            continue
        for val in (0.0, 1.0):
            lo = lb_z.copy()
            hi = ub_z.copy()
            lo[k] = hi[k] = val
            child = search.solve(_relaxation(inst, lo, hi), warm=sol)
            nodes += 1
            if child.status == INFEASIBLE or child.x is None:
                continue
            if child.objective >= search.objective - limits.abs_gap(search.objective):
                continue
            cz = child.x[inst.z]
            if np.all(np.abs(cz - np.round(cz)) <= limits.int_tol):
                search.try_pattern(cz)
                continue
            push(child, lo, hi)

    inc = search.objective
    best_bound = min(inc, heap[0][0]) if heap else inc
    if search.best is None:
        st = BNB_INFEASIBLE if status == BNB_OPTIMAL else status
        return BnbReport(None, None, nodes, best_bound, np.inf, st, search.qp_solves, history)
    report = BnbReport(search.best, search.best_z, nodes, best_bound, inc - best_bound, status,
                       search.qp_solves, history)
    log.debug("bnb %s", report.log_line())
    return report
