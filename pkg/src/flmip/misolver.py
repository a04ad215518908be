"""Mixed-integer LP/QP solving by branch-and-bound over activation binaries.

Relaxations go to mature convex backends: HiGHS (via scipy.linprog) for linear
costs, Clarabel for convex-quadratic costs. The tree search itself is local:
best-first on the relaxation bound, branching on the most fractional binary,
with deterministic tie-breaking so node counts are reproducible.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

import clarabel

from .encoder import MiConstraintSystem
from .errors import SolverError, TooManyBinariesError

FEAS_TOL = 1e-7
INT_TOL = 1e-6
GAP_TOL = 1e-6


@dataclass
class LinearObjective:
    c: np.ndarray

    def value(self, x: np.ndarray) -> float:
        return float(self.c @ x)

    @property
    def is_quadratic(self) -> bool:
        return False


@dataclass
class QuadraticObjective:
    """1/2 x' H x + c' x with H symmetric PSD."""

    H: sp.spmatrix
    c: np.ndarray

    def __post_init__(self):
        self.H = sp.csc_matrix(self.H)
        asym = abs(self.H - self.H.T)
        if asym.nnz and asym.max() > 1e-12:
            raise ValueError("quadratic form must be symmetric")

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.H @ x) + self.c @ x)

    @property
    def is_quadratic(self) -> bool:
        return True


@dataclass
class MiProblem:
    system: MiConstraintSystem
    objective: LinearObjective | QuadraticObjective

    @property
    def num_binaries(self) -> int:
        return self.system.num_binaries


@dataclass
class MiSolution:
    status: str  # optimal | infeasible | budget-exhausted
    x: np.ndarray | None
    objective: float | None
    node_count: int
    wall_time: float
    gap: float = 0.0
    incumbent_history: list[tuple[int, float]] = field(default_factory=list)
    max_prune_violation: float = 0.0


@dataclass
class RelaxResult:
    status: str  # optimal | infeasible
    x: np.ndarray | None
    objective: float | None


class _LpBackend:
    def __init__(self, problem: MiProblem):
        A_eq, b_eq, A_ub, b_ub = problem.system.matrices()
        self.A_eq = A_eq if A_eq.shape[0] else None
        self.b_eq = b_eq if A_eq.shape[0] else None
        self.A_ub = A_ub if A_ub.shape[0] else None
        self.b_ub = b_ub if A_ub.shape[0] else None
        self.c = np.asarray(problem.objective.c, dtype=float)

    def solve(self, lb, ub) -> RelaxResult:
        res = linprog(self.c, A_ub=self.A_ub, b_ub=self.b_ub,
                      A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=list(zip(lb, ub)), method="highs",
                      options={"primal_feasibility_tolerance": 1e-9,
                               "dual_feasibility_tolerance": 1e-9})
        if res.status == 0:
            return RelaxResult("optimal", res.x, float(res.fun))
        if res.status == 2:
            return RelaxResult("infeasible", None, None)
        raise SolverError(f"LP backend failed: status {res.status} ({res.message})")


class _QpBackend:
    """Clarabel interior-point solves; the constraint matrix is built once and
    only the bound right-hand sides change between nodes."""

    def __init__(self, problem: MiProblem):
        sys_ = problem.system
        n = sys_.num_vars
        A_eq, b_eq, A_ub, b_ub = sys_.matrices()
        lb0 = np.array(sys_.lb)
        ub0 = np.array(sys_.ub)
        self.ub_rows = np.flatnonzero(np.isfinite(ub0) | np.array(sys_.is_binary))
        self.lb_rows = np.flatnonzero(np.isfinite(lb0) | np.array(sys_.is_binary))
        eye = sp.identity(n, format="csr")
        blocks = [A_eq, A_ub, eye[self.ub_rows], -eye[self.lb_rows]]
        self.A = sp.vstack(blocks, format="csc")
        self.b_head = np.concatenate([b_eq, b_ub])
        self.n_eq = A_eq.shape[0]
        self.n_in = A_ub.shape[0] + len(self.ub_rows) + len(self.lb_rows)
        self.P = sp.triu(problem.objective.H, format="csc")
        self.q = np.asarray(problem.objective.c, dtype=float)
        self.objective = problem.objective
        self.settings = []
        for tol in (1e-10, 1e-8):
            s = clarabel.DefaultSettings()
            s.verbose = False
            s.tol_feas = tol
            s.tol_gap_abs = tol
            s.tol_gap_rel = tol
            self.settings.append(s)

    def solve(self, lb, ub) -> RelaxResult:
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        b = np.concatenate([self.b_head, ub[self.ub_rows], -lb[self.lb_rows]])
        cones = [clarabel.ZeroConeT(self.n_eq), clarabel.NonnegativeConeT(self.n_in)]
        # retry with looser tolerances if the interior point stalls
        for settings in self.settings:
            solver = clarabel.DefaultSolver(self.P, self.q, self.A, b, cones,
                                            settings)
            sol = solver.solve()
            status = str(sol.status)
            if status in ("Solved", "AlmostSolved"):
                x = np.array(sol.x)
                return RelaxResult("optimal", x, self.objective.value(x))
            if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
                return RelaxResult("infeasible", None, None)
        return RelaxResult("failed", None, None)


def _backend(problem: MiProblem):
    if problem.objective.is_quadratic:
        return _QpBackend(problem)
    return _LpBackend(problem)


def solve_relaxation(problem: MiProblem, lb=None, ub=None) -> RelaxResult:
    """Solve the continuous relaxation (binaries relaxed to [0, 1])."""
    lb = np.array(problem.system.lb) if lb is None else np.asarray(lb, dtype=float)
    ub = np.array(problem.system.ub) if ub is None else np.asarray(ub, dtype=float)
    return _backend(problem).solve(lb, ub)


def _solve_fixed(backend, lb, ub, bin_idx, assignment) -> RelaxResult:
    lbf, ubf = lb.copy(), ub.copy()
    for i, val in assignment.items():
        lbf[i] = ubf[i] = float(val)
    return backend.solve(lbf, ubf)


class FixedBinarySolver:
    """Repeated solves of one problem with different binary fixings.

    The relaxation backend (and for QP, the constraint matrix) is built once;
    each call only changes variable bounds. Used for warm-start evaluation and
    activation-pattern polishing in the controllers.
    """

    def __init__(self, problem: MiProblem):
        self._backend = _backend(problem)
        self._bin_idx = problem.system.binary_indices
        self._lb = np.array(problem.system.lb)
        self._ub = np.array(problem.system.ub)
        self.objective = problem.objective

    def solve(self, assignment: dict[int, int]) -> RelaxResult:
        return _solve_fixed(self._backend, self._lb, self._ub,
                            self._bin_idx, assignment)


def solve_mi(problem: MiProblem, node_budget: int | None = None,
             warm_binaries: list[dict[int, int]] | None = None,
             use_suggestion: bool = True) -> MiSolution:
    """Branch-and-bound to global optimality (relative gap 1e-6).

    warm_binaries: optional full/partial binary assignments tried up front to
    seed the incumbent (shifted MPC solutions). use_suggestion adds a rounding
    dive from the root relaxation using the encoded networks' forward pass.
    """
    t0 = time.perf_counter()
    sys_ = problem.system
    bin_idx = sys_.binary_indices
    lb0 = np.array(sys_.lb)
    ub0 = np.array(sys_.ub)
    backend = _backend(problem)

    best_x, best_obj = None, np.inf
    history: list[tuple[int, float]] = []
    node_count = 0
    max_prune_violation = 0.0

    def fractional(x):
        if not bin_idx:
            return None
        vals = x[bin_idx]
        dist = np.abs(vals - np.round(vals))
        j = int(np.argmax(dist))
        if dist[j] <= INT_TOL:
            return None
        return bin_idx[j]

    def consider(x, obj):
        nonlocal best_x, best_obj
        if obj < best_obj - 1e-12:
            best_x, best_obj = x, obj
            history.append((node_count, obj))

    for assignment in (warm_binaries or []):
        res = _solve_fixed(backend, lb0, ub0, bin_idx, assignment)
        # a partial assignment can come back fractional; only integral
        # solutions qualify as incumbents
        if res.status == "optimal" and fractional(res.x) is None:
            consider(res.x, res.objective)

    root = backend.solve(lb0, ub0)
    node_count += 1
    if root.status == "failed":
        if best_x is not None:
            return MiSolution("budget-exhausted", best_x, best_obj, node_count,
                              time.perf_counter() - t0, gap=np.inf,
                              incumbent_history=history)
        raise SolverError("root relaxation failed numerically")
    if root.status == "infeasible":
        if best_x is not None:  # warm start feasible but root not: cannot happen
            raise SolverError("root relaxation infeasible despite feasible incumbent")
        return MiSolution("infeasible", None, None, node_count,
                          time.perf_counter() - t0)

    frac0 = fractional(root.x)
    if frac0 is None:
        return MiSolution("optimal", root.x, root.objective, node_count,
                          time.perf_counter() - t0,
                          incumbent_history=[(node_count, root.objective)])

    if use_suggestion and sys_.copies:
        guess = sys_.suggest_binaries(root.x)
        if guess:
            res = _solve_fixed(backend, lb0, ub0, bin_idx, guess)
            if res.status == "optimal":
                consider(res.x, res.objective)

    # Heap entries: (bound, depth, counter, fixings dict)
    counter = 0
    heap = [(root.objective, 0, counter, {})]
    budget_hit = False
    bound_floor = root.objective

    def gap_ok(bound):
        return best_obj - bound <= GAP_TOL * max(1.0, abs(best_obj))

    while heap:
        bound, depth, _, fixings = heapq.heappop(heap)
        bound_floor = bound
        if best_x is not None and gap_ok(bound):
            break
        if node_budget is not None and node_count >= node_budget:
            budget_hit = True
            break
        res = _solve_fixed(backend, lb0, ub0, bin_idx, fixings) if fixings else root
        if fixings:
            node_count += 1
        if res.status != "optimal":
            # infeasible node, or a numeric failure we cannot branch on
            continue
        if res.objective >= best_obj - 1e-9:
            # prune: the node cannot beat the incumbent
            max_prune_violation = max(max_prune_violation,
                                      best_obj - res.objective - 1e-9)
            continue
        br = fractional(res.x)
        if br is None:
            consider(res.x, res.objective)
            continue
        for val in (0, 1):
            child = dict(fixings)
            child[br] = val
            counter += 1
            heapq.heappush(heap, (res.objective, depth + 1, counter, child))

    status = "optimal"
    if budget_hit:
        status = "budget-exhausted" if best_x is not None else "infeasible"
    elif best_x is None:
        status = "infeasible"
    gap = 0.0
    if best_x is not None and heap:
        gap = max(0.0, best_obj - min(bound_floor, heap[0][0]))
    return MiSolution(status, best_x, best_obj if best_x is not None else None,
                      node_count, time.perf_counter() - t0, gap=gap,
                      incumbent_history=history,
                      max_prune_violation=max_prune_violation)


def brute_force_mi(problem: MiProblem, max_binaries: int = 14) -> MiSolution:
    """Enumerate every binary assignment; test oracle only."""
    t0 = time.perf_counter()
    bin_idx = problem.system.binary_indices
    B = len(bin_idx)
    if B > max_binaries:
        raise TooManyBinariesError(f"{B} binaries exceeds brute-force cap {max_binaries}")
    lb0 = np.array(problem.system.lb)
    ub0 = np.array(problem.system.ub)
    backend = _backend(problem)
    best_x, best_obj = None, np.inf
    count = 0
    for mask in range(2 ** B):
        assignment = {bin_idx[i]: (mask >> i) & 1 for i in range(B)}
        res = _solve_fixed(backend, lb0, ub0, bin_idx, assignment)
        count += 1
        if res.status == "optimal" and res.objective < best_obj - 1e-12:
            best_x, best_obj = res.x, res.objective
    if best_x is None:
        return MiSolution("infeasible", None, None, count, time.perf_counter() - t0)
    return MiSolution("optimal", best_x, best_obj, count, time.perf_counter() - t0)
