"""Optimization-based control laws consuming the MI network encoding.

Two laws: a one-step CLF-CBF program (linear or quadratic cost, solved as
MILP/MIQP) and a receding-horizon MPC whose input constraint is the network
encoding replicated along the prediction horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_discrete_are

from .dynamics import BrunovskyModel
from .encoder import HorizonSystem, MiConstraintSystem, encode, fbbt, replicate_over_horizon
from .errors import ConfigurationError, GeometryError
from .misolver import (FixedBinarySolver, LinearObjective, MiProblem, MiSolution,
                       QuadraticObjective, solve_mi)
from .relu_net import ReluNetwork


def quad_clf(P: np.ndarray):
    """V(z) = z' P z with gradient 2 P z."""
    P = np.asarray(P, dtype=float)
    return (lambda z: float(z @ P @ z)), (lambda z: 2.0 * P @ z)


def ball_cbf(z_o: np.ndarray, r_o: float):
    """H(z) = ||z - z_o|| - r_o; gradient undefined at the center."""
    z_o = np.asarray(z_o, dtype=float)

    def H(z):
        return float(np.linalg.norm(z - z_o) - r_o)

    def gradH(z):
        d = np.linalg.norm(z - z_o)
        if d < 1e-9:
            raise GeometryError("state coincides with the obstacle center")
        return (z - z_o) / d

    return H, gradH


@dataclass
class ClfCbfSpec:
    P: np.ndarray
    z_o: np.ndarray
    r_o: float
    kappa: float
    beta: float
    cost_mode: str            # "Lcost" | "Qcost"
    K_fb: np.ndarray          # fallback gain, k(z) = -K_fb z (Qcost target)
    A: np.ndarray
    B: np.ndarray
    v_box: tuple[float, float]

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if not np.allclose(self.P, self.P.T) or np.any(np.linalg.eigvalsh(self.P) <= 0):
            raise ConfigurationError("P must be symmetric positive definite")
        if self.r_o <= 0:
            raise ConfigurationError("obstacle radius must be positive")
        if self.cost_mode not in ("Lcost", "Qcost"):
            raise ConfigurationError(f"unknown cost mode {self.cost_mode!r}")
        self.z_o = np.asarray(self.z_o, dtype=float)
        self.K_fb = np.atleast_2d(np.asarray(self.K_fb, dtype=float))
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)


@dataclass
class StepResult:
    status: str               # optimal | infeasible | budget-exhausted
    v: np.ndarray | None
    delta: float | None
    solution: MiSolution | None
    predicted_z: np.ndarray | None = None   # MPC: (N_p + 1, n_z) stage states
    predicted_v: np.ndarray | None = None
    predicted_nn_out: np.ndarray | None = None


class ClfCbfController:
    """One-step CLF-CBF law; the network copy is re-encoded per step with the
    input box collapsed to the measured state, so most binaries drop out."""

    def __init__(self, spec: ClfCbfSpec, net: ReluNetwork, u_max_eff,
                 node_budget: int | None = 1500):
        self.spec = spec
        self.net = net
        self.u_max_eff = np.asarray(u_max_eff, dtype=float).ravel()
        self.node_budget = node_budget
        self.V, self.gradV = quad_clf(spec.P)
        self.H, self.gradH = ball_cbf(spec.z_o, spec.r_o)
        self._prev_alpha: dict[tuple[int, int], int] = {}
        if net.output_dim != spec.B.shape[1]:
            raise ConfigurationError("network output dim != input dim m")

    def _scan_v(self, z: np.ndarray, samples: int = 4001):
        """Fine scan of the surrogate along the v axis at the measured state.

        Returns (grid, outputs, feasible mask) for the output-budget test.
        The scan drives both the v-interval shrink and warm-start patterns;
        with z fixed the problem is one-dimensional in v, so a dense sweep
        locates the feasible segments cheaply.
        """
        lo, hi = self.spec.v_box
        vs = np.linspace(lo, hi, samples)
        pts = np.column_stack([np.tile(z, (samples, 1)), vs])
        outs = self.net.forward_batch(pts)[:, 0]
        feas = np.abs(outs) <= self.u_max_eff[0]
        return vs, outs, feas

    def _build(self, z: np.ndarray):
        spec = self.spec
        n_z, m = spec.A.shape[0], spec.B.shape[1]
        v_lo, v_hi = spec.v_box
        vs, _, feas = self._scan_v(z)
        if feas.any():
            # shrink the v interval to the hull of the feasible scan points;
            # one grid step of slack keeps segment endpoints inside
            h = vs[1] - vs[0]
            v_lo = max(v_lo, float(vs[feas].min()) - h)
            v_hi = min(v_hi, float(vs[feas].max()) + h)
        box = [(zi, zi) for zi in z] + [(v_lo, v_hi)] * m
        # degenerate z-axes are fine for interval propagation
        bounds = fbbt(self.net, [(lo - 0.0, hi + 0.0) for lo, hi in box])
        sys_ = encode(self.net, bounds, self.u_max_eff)
        copy = sys_.copies[0]
        v_idx = copy.input_idx[n_z:]
        d_idx = sys_.add_var("delta", 0.0, np.inf)

        gV, gH = self.gradV(z), self.gradH(z)
        az = spec.A @ z
        # CLF: gV'(Az + Bv) <= -beta V + delta
        clf = [(v_idx[j], float(gV @ spec.B[:, j])) for j in range(m)]
        clf.append((d_idx, -1.0))
        sys_.add_le(clf, -spec.beta * self.V(z) - float(gV @ az))
        # CBF: gH'(Az + Bv) >= -kappa H
        cbf = [(v_idx[j], float(gH @ spec.B[:, j])) for j in range(m)]
        sys_.add_ge(cbf, -spec.kappa * self.H(z) - float(gH @ az))
        return sys_, v_idx, d_idx, gV

    def _objective(self, sys_, v_idx, d_idx, z, gV, min_norm=False):
        spec = self.spec
        m = len(v_idx)
        n = sys_.num_vars
        c = np.zeros(n)
        c[d_idx] = 1.0
        if spec.cost_mode == "Qcost" or min_norm:
            target = np.zeros(m) if min_norm else -(spec.K_fb @ z)
            H = sp.lil_matrix((n, n))
            for j, vi in enumerate(v_idx):
                H[vi, vi] = 2.0
                c[vi] = -2.0 * target[j]
            return QuadraticObjective(sp.csc_matrix(H), c)
        for j, vi in enumerate(v_idx):
            c[vi] = float(gV @ spec.B[:, j])
        return LinearObjective(c)

    def _pattern(self, sys_: MiConstraintSystem, z, v) -> dict[int, int]:
        copy = sys_.copies[0]
        y0 = np.concatenate([z, np.atleast_1d(v)])
        out = {}
        for k, pre in enumerate(self.net.preactivations(y0)):
            for j, idx in enumerate(copy.alpha_idx[k]):
                if idx is not None:
                    out[idx] = 1 if pre[j] > 0 else 0
        return out

    def _warm(self, sys_: MiConstraintSystem, z: np.ndarray,
              gV: np.ndarray) -> list[dict[int, int]]:
        spec = self.spec
        warm = []
        copy = sys_.copies[0]
        prev = {}
        for k, layer in enumerate(copy.alpha_idx):
            for j, idx in enumerate(layer):
                if idx is not None and (k, j) in self._prev_alpha:
                    prev[idx] = self._prev_alpha[(k, j)]
        if prev:
            warm.append(prev)
        # best scan candidate: evaluate the step cost along the feasible sweep
        vs, _, feas = self._scan_v(z)
        gH = self.gradH(z)
        az = spec.A @ z
        bv = float(gV @ spec.B[:, 0])
        cbf_ok = (gH @ spec.B[:, 0] * vs + float(gH @ az)
                  >= -spec.kappa * self.H(z) - 1e-9)
        ok = feas & cbf_ok
        if ok.any():
            cand = vs[ok]
            delta = np.maximum(0.0, bv * cand + float(gV @ az)
                               + spec.beta * self.V(z))
            if spec.cost_mode == "Qcost":
                target = float((-(spec.K_fb @ z)).ravel()[0])
                cost = (cand - target) ** 2 + delta
            else:
                cost = bv * cand + delta
            v_best = float(cand[int(np.argmin(cost))])
            pat = self._pattern(sys_, z, v_best)
            if pat and pat != prev:
                warm.append(pat)
        return warm

    def step(self, z) -> StepResult:
        z = np.asarray(z, dtype=float).ravel()
        sys_, v_idx, d_idx, gV = self._build(z)
        objective = self._objective(sys_, v_idx, d_idx, z, gV)
        problem = MiProblem(sys_, objective)
        sol = solve_mi(problem, node_budget=self.node_budget,
                       warm_binaries=self._warm(sys_, z, gV))
        if sol.x is None:
            return StepResult("infeasible", None, None, sol)

        if (self.spec.cost_mode == "Lcost"
                and np.linalg.norm(np.asarray(objective.c)[v_idx]) < 1e-8):
            # flat linear cost (z ~ 0): deterministic min-norm tie-break
            sys2, v2, d2, gV2 = self._build(z)
            sol2 = solve_mi(MiProblem(sys2, self._objective(sys2, v2, d2, z, gV2,
                                                            min_norm=True)),
                            node_budget=self.node_budget,
                            warm_binaries=self._warm(sys2, z, gV2))
            if sol2.x is not None:
                sys_, v_idx, d_idx, sol = sys2, v2, d2, sol2

        copy = sys_.copies[0]
        for k, layer in enumerate(copy.alpha_idx):
            for j, idx in enumerate(layer):
                if idx is not None:
                    self._prev_alpha[(k, j)] = int(round(sol.x[idx]))
        return StepResult(sol.status, sol.x[v_idx].copy(), float(sol.x[d_idx]), sol)


@dataclass
class MpcSpec:
    N_p: int
    Q: np.ndarray
    R: np.ndarray
    x_box: list[tuple[float, float]]        # polytopic (box) state constraint X_z
    v_box: tuple[float, float]
    model: BrunovskyModel
    z_ref: Callable[[float], np.ndarray]    # reference at absolute time t

    def __post_init__(self):
        if self.N_p < 1:
            raise ConfigurationError("N_p must be >= 1")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ConfigurationError("R must be positive definite")
        if np.any(np.linalg.eigvalsh(self.Q) < -1e-12):
            raise ConfigurationError("Q must be positive semidefinite")


class MpcController:
    """Receding-horizon MIQP with the network encoding on every stage."""

    def __init__(self, spec: MpcSpec, net: ReluNetwork, u_max_eff,
                 node_budget: int | None = 300):
        self.spec = spec
        self.net = net
        self.u_max_eff = np.asarray(u_max_eff, dtype=float).ravel()
        self.node_budget = node_budget
        n_z = spec.model.A.shape[0]
        m = spec.model.B.shape[1]
        input_box = list(spec.x_box) + [tuple(spec.v_box)] * m
        self.bounds = fbbt(net, input_box)
        stage = encode(net, self.bounds, self.u_max_eff)
        self.horizon: HorizonSystem = replicate_over_horizon(
            stage, spec.N_p, (spec.model.A_d, spec.model.B_d))
        self.n_z, self.m = n_z, m
        self._base_z0 = [(self.horizon.system.lb[i], self.horizon.system.ub[i])
                         for i in self.horizon.stage_z_idx[0]]
        # infinite-horizon tail weight: without it a short horizon brakes too
        # late and the closed loop overshoots every reference step
        self.P_term = solve_discrete_are(spec.model.A_d, spec.model.B_d,
                                         spec.Q, spec.R)
        B_d = spec.model.B_d
        self.K_lqr = np.linalg.solve(spec.R + B_d.T @ self.P_term @ B_d,
                                     B_d.T @ self.P_term @ spec.model.A_d)
        self._H = self._hessian()
        self._prev_solution: np.ndarray | None = None
        self._prev_v: np.ndarray | None = None

    def _hessian(self) -> sp.csc_matrix:
        sys_ = self.horizon.system
        H = sp.lil_matrix((sys_.num_vars, sys_.num_vars))
        Q2, R2 = 2.0 * self.spec.Q, 2.0 * self.spec.R
        for k in range(self.spec.N_p):
            zi = self.horizon.stage_z_idx[k]
            vi = self.horizon.stage_v_idx[k]
            for a in range(self.n_z):
                for b in range(self.n_z):
                    if Q2[a, b] != 0.0:
                        H[zi[a], zi[b]] = Q2[a, b]
            for a in range(self.m):
                for b in range(self.m):
                    if R2[a, b] != 0.0:
                        H[vi[a], vi[b]] = R2[a, b]
        ti = self.horizon.terminal_z_idx
        P2 = 2.0 * self.P_term
        for a in range(self.n_z):
            for b in range(self.n_z):
                if P2[a, b] != 0.0:
                    H[ti[a], ti[b]] = P2[a, b]
        return sp.csc_matrix(H)

    def _linear_term(self, t: float) -> np.ndarray:
        sys_ = self.horizon.system
        c = np.zeros(sys_.num_vars)
        t_s = self.spec.model.t_s
        for k in range(self.spec.N_p):
            ref = np.asarray(self.spec.z_ref(t + k * t_s), dtype=float)
            cz = -2.0 * self.spec.Q @ ref
            for a, zi in enumerate(self.horizon.stage_z_idx[k]):
                c[zi] = cz[a]
        ref_T = np.asarray(self.spec.z_ref(t + self.spec.N_p * t_s), dtype=float)
        cT = -2.0 * self.P_term @ ref_T
        for a, zi in enumerate(self.horizon.terminal_z_idx):
            c[zi] = cT[a]
        return c

    def _shifted_warm(self) -> list[dict[int, int]]:
        if self._prev_solution is None:
            return []
        x = self._prev_solution
        copies = self.horizon.system.copies
        warm = {}
        for k in range(self.spec.N_p):
            src = copies[min(k + 1, self.spec.N_p - 1)]
            dst = copies[k]
            for kk, layer in enumerate(dst.alpha_idx):
                for j, idx in enumerate(layer):
                    if idx is not None and src.alpha_idx[kk][j] is not None:
                        warm[idx] = int(round(x[src.alpha_idx[kk][j]]))
        return [warm] if warm else []

    def _feasible_rollout(self, z0: np.ndarray, v_guess) -> dict[int, int] | None:
        """Activation pattern of a constructed feasible plan.

        Rolls the nominal model forward from the measured state, snapping each
        stage input to the surrogate-feasible v nearest the guess via a dense
        1-D scan. v_guess is a length-N_p array or a callable (stage, state)
        giving the desired input. The resulting point satisfies every MI
        constraint, so fixing its pattern always yields an incumbent.
        """
        spec = self.spec
        lo, hi = spec.v_box
        vs = np.linspace(lo, hi, 801)
        z = np.asarray(z0, dtype=float).copy()
        pattern: dict[int, int] = {}
        for k in range(spec.N_p):
            for i, (blo, bhi) in enumerate(spec.x_box):
                if not blo <= z[i] <= bhi:
                    return None
            pts = np.column_stack([np.tile(z, (vs.size, 1)), vs])
            outs = self.net.forward_batch(pts)[:, 0]
            feas = np.abs(outs) <= self.u_max_eff[0]
            if not feas.any():
                return None
            cand = vs[feas]
            guess = v_guess(k, z) if callable(v_guess) else v_guess[k]
            v = float(cand[int(np.argmin(np.abs(cand - guess)))])
            copy = self.horizon.system.copies[k]
            y0 = np.concatenate([z, [v]])
            for kk, pre in enumerate(self.net.preactivations(y0)):
                for j, idx in enumerate(copy.alpha_idx[kk]):
                    if idx is not None:
                        pattern[idx] = 1 if pre[j] > 0 else 0
            z = spec.model.A_d @ z + spec.model.B_d @ np.array([v])
        return pattern

    def _warm_candidates(self, z: np.ndarray, t: float) -> list[dict[int, int]]:
        warm = []
        t_s = self.spec.model.t_s

        def lqr_guess(k, zk):
            ref = np.asarray(self.spec.z_ref(t + k * t_s), dtype=float)
            return float((self.K_lqr @ (ref - zk))[0])

        pat_lqr = self._feasible_rollout(z, lqr_guess)
        if pat_lqr:
            warm.append(pat_lqr)
        if self._prev_solution is not None and self._prev_v is not None:
            shifted = np.concatenate([self._prev_v[1:, 0],
                                      self._prev_v[-1:, 0]])
            pat = self._feasible_rollout(z, shifted)
            if pat and pat not in warm:
                warm.append(pat)
        pat0 = self._feasible_rollout(z, np.zeros(self.spec.N_p))
        if pat0 and pat0 not in warm:
            warm.append(pat0)
        warm.extend(w for w in self._shifted_warm() if w not in warm)
        return warm

    def _plan_pattern(self, x: np.ndarray) -> dict[int, int]:
        """Activation pattern of the true network along the plan embedded in x."""
        pattern: dict[int, int] = {}
        for k in range(self.spec.N_p):
            zk = np.array([x[i] for i in self.horizon.stage_z_idx[k]])
            vk = np.array([x[i] for i in self.horizon.stage_v_idx[k]])
            copy = self.horizon.system.copies[k]
            for kk, pre in enumerate(self.net.preactivations(np.concatenate([zk, vk]))):
                for j, idx in enumerate(copy.alpha_idx[kk]):
                    if idx is not None:
                        pattern[idx] = 1 if pre[j] > 0 else 0
        return pattern

    def _polish(self, problem: MiProblem, sol: MiSolution,
                max_rounds: int = 5) -> MiSolution:
        """Pattern fixpoint iteration on a budget-exhausted incumbent.

        The incumbent is only optimal for the activation pattern it was found
        with. Re-deriving the pattern from the incumbent's own state/input plan
        and re-solving the pattern-fixed QP often improves it; iterate until
        the pattern stops changing or nothing improves.
        """
        fixed = FixedBinarySolver(problem)
        best_x, best_obj = sol.x, sol.objective
        seen = set()
        for _ in range(max_rounds):
            pattern = self._plan_pattern(best_x)
            key = tuple(sorted(pattern.items()))
            if key in seen:
                break
            seen.add(key)
            res = fixed.solve(pattern)
            if res.status != "optimal" or res.objective >= best_obj - 1e-9:
                break
            best_x, best_obj = res.x, res.objective
        if best_obj < sol.objective - 1e-12:
            sol = MiSolution(sol.status, best_x, best_obj, sol.node_count,
                             sol.wall_time, gap=sol.gap,
                             incumbent_history=sol.incumbent_history,
                             max_prune_violation=sol.max_prune_violation)
        return sol

    def step(self, z, t: float) -> StepResult:
        z = np.asarray(z, dtype=float).ravel()
        sys_ = self.horizon.system
        for i, zi in enumerate(self.horizon.stage_z_idx[0]):
            sys_.set_bounds(zi, z[i], z[i])
        problem = MiProblem(sys_, QuadraticObjective(self._H, self._linear_term(t)))
        sol = solve_mi(problem, node_budget=self.node_budget,
                       warm_binaries=self._warm_candidates(z, t))
        if sol.x is not None and sol.status == "budget-exhausted":
            sol = self._polish(problem, sol)
        # restore the stage-0 box for the next rebuild
        for (lo, hi), zi in zip(self._base_z0, self.horizon.stage_z_idx[0]):
            sys_.set_bounds(zi, lo, hi)
        if sol.x is None:
            return StepResult("infeasible", None, None, sol)
        self._prev_solution = sol.x
        zs = np.array([[sol.x[i] for i in self.horizon.stage_z_idx[k]]
                       for k in range(self.spec.N_p)]
                      + [[sol.x[i] for i in self.horizon.terminal_z_idx]])
        vs = np.array([[sol.x[i] for i in self.horizon.stage_v_idx[k]]
                       for k in range(self.spec.N_p)])
        self._prev_v = vs
        nn = np.array([[sol.x[i] for i in sys_.copies[k].output_idx]
                       for k in range(self.spec.N_p)])
        v0 = vs[0].copy()
        return StepResult(sol.status, v0, None, sol,
                          predicted_z=zs, predicted_v=vs, predicted_nn_out=nn)
