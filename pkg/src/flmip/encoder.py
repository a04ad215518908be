"""Exact mixed-integer linear encoding of a ReLU network over an input box.

Per hidden node with pre-activation bounds [L, U] the encoding introduces a
split ybar - yund of the pre-activation, a binary alpha selecting the active
branch, and the two big-M rows ybar <= U+ alpha, yund <= -L- (1 - alpha).
Node bounds come from interval propagation (FBBT) of the input box. Stably
active/inactive nodes (L >= 0 / U <= 0) drop their binary by default.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DimensionError
from .relu_net import ReluNetwork

INF = np.inf


@dataclass
class NodeBounds:
    """Per-node pre-activation bounds plus the input box they were derived from."""

    input_lo: np.ndarray
    input_hi: np.ndarray
    L: list[np.ndarray]  # one array per hidden layer
    U: list[np.ndarray]

    def __post_init__(self):
        for k, (lo, hi) in enumerate(zip(self.L, self.U)):
            if np.any(lo > hi + 1e-12):
                raise ValueError(f"layer {k + 1}: lower bound exceeds upper bound")


def fbbt(net: ReluNetwork, input_box) -> NodeBounds:
    """Interval-propagate the input box through the hidden layers.

    Layer 1 uses the raw input interval; deeper layers use the ReLU-clipped
    interval [max(0, L), max(0, U)] of the previous layer.
    """
    box = np.atleast_2d(np.asarray(input_box, dtype=float))
    if box.shape != (net.input_dim, 2):
        raise DimensionError(
            f"input box shape {box.shape} does not match input dim {net.input_dim}")
    if not np.isfinite(box).all():
        raise ValueError("input box must be finite")
    lo, hi = box[:, 0].copy(), box[:, 1].copy()
    if np.any(lo > hi):
        raise ValueError("input box has lo > hi")
    Ls, Us = [], []
    cur_lo, cur_hi = lo, hi
    for W, b in net.layers[:-1]:
        cand1 = W * cur_hi
        cand2 = W * cur_lo
        U = np.maximum(cand1, cand2).sum(axis=1) + b
        L = np.minimum(cand1, cand2).sum(axis=1) + b
        Ls.append(L)
        Us.append(U)
        cur_lo, cur_hi = np.maximum(L, 0.0), np.maximum(U, 0.0)
    return NodeBounds(input_lo=lo, input_hi=hi, L=Ls, U=Us)


@dataclass
class EncodedCopy:
    """Variable bookkeeping for one network copy inside a constraint system."""

    net: ReluNetwork
    input_idx: list[int]
    ybar_idx: list[list[int]]        # per hidden layer
    yund_idx: list[list[int]]
    alpha_idx: list[list[int | None]]  # None where the binary was eliminated
    alpha_fixed: list[list[int | None]]  # 0/1 for eliminated nodes, else None
    output_idx: list[int]
    bounds: NodeBounds

    @property
    def node_count(self) -> int:
        return sum(len(layer) for layer in self.ybar_idx)

    def suggest_binaries(self, x: np.ndarray) -> dict[int, int]:
        """Binary assignment implied by forward-propagating the input values in x."""
        y0 = np.array([x[i] for i in self.input_idx])
        out = {}
        for k, z in enumerate(self.net.preactivations(y0)):
            for j, a_idx in enumerate(self.alpha_idx[k]):
                if a_idx is not None:
                    out[a_idx] = 1 if z[j] > 0 else 0
        return out


class MiConstraintSystem:
    """Continuous + binary variables, linear rows, and encoded-copy metadata.

    Rows are kept in two groups: equalities (A_eq x = b_eq) and <=-inequalities
    (A_ub x <= b_ub); variable bounds live on the variables themselves.
    """

    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.is_binary: list[bool] = []
        self._eq_rows: list[tuple[list[tuple[int, float]], float]] = []
        self._ub_rows: list[tuple[list[tuple[int, float]], float]] = []
        self.copies: list[EncodedCopy] = []
        self._cache = None

    # -- variables -------------------------------------------------------
    def add_var(self, name: str, lb: float = -INF, ub: float = INF,
                binary: bool = False) -> int:
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.is_binary.append(bool(binary))
        self._cache = None
        return len(self.names) - 1

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def binary_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.is_binary) if b]

    @property
    def num_binaries(self) -> int:
        return sum(self.is_binary)

    def set_bounds(self, idx: int, lb: float, ub: float) -> None:
        self.lb[idx] = float(lb)
        self.ub[idx] = float(ub)

    # -- rows --------------------------------------------------------------
    def add_eq(self, coeffs, rhs: float) -> None:
        self._eq_rows.append((list(coeffs), float(rhs)))
        self._cache = None

    def add_le(self, coeffs, rhs: float) -> None:
        self._ub_rows.append((list(coeffs), float(rhs)))
        self._cache = None

    def add_ge(self, coeffs, rhs: float) -> None:
        self.add_le([(i, -c) for i, c in coeffs], -rhs)

    @property
    def num_eq_rows(self) -> int:
        return len(self._eq_rows)

    @property
    def num_ub_rows(self) -> int:
        return len(self._ub_rows)

    def matrices(self):
        """(A_eq, b_eq, A_ub, b_ub) as CSR matrices / arrays, cached."""
        if self._cache is None:
            n = self.num_vars
            self._cache = (_rows_to_csr(self._eq_rows, n),
                           np.array([r for _, r in self._eq_rows]),
                           _rows_to_csr(self._ub_rows, n),
                           np.array([r for _, r in self._ub_rows]))
        return self._cache

    def row_values(self, x: np.ndarray):
        """Residuals (A_eq x - b_eq, A_ub x - b_ub) for feasibility checks."""
        A_eq, b_eq, A_ub, b_ub = self.matrices()
        return A_eq @ x - b_eq, A_ub @ x - b_ub

    def feasible(self, x: np.ndarray, tol: float = 1e-7) -> bool:
        eq, ub = self.row_values(x)
        lb_ok = np.all(x >= np.array(self.lb) - tol)
        ub_ok = np.all(x <= np.array(self.ub) + tol)
        return (bool(lb_ok and ub_ok)
                and (eq.size == 0 or float(np.abs(eq).max()) <= tol)
                and (ub.size == 0 or float(ub.max()) <= tol))

    def suggest_binaries(self, x: np.ndarray) -> dict[int, int]:
        out = {}
        for cp in self.copies:
            out.update(cp.suggest_binaries(x))
        return out

    # -- replication -------------------------------------------------------
    def append_system(self, other: "MiConstraintSystem", suffix: str = "") -> int:
        """Splice all variables/rows/copies of another system in; returns var offset."""
        off = self.num_vars
        for name, lb, ub, binary in zip(other.names, other.lb, other.ub, other.is_binary):
            self.add_var(name + suffix, lb, ub, binary)
        for coeffs, rhs in other._eq_rows:
            self.add_eq([(i + off, c) for i, c in coeffs], rhs)
        for coeffs, rhs in other._ub_rows:
            self.add_le([(i + off, c) for i, c in coeffs], rhs)
        for cp in other.copies:
            self.copies.append(EncodedCopy(
                net=cp.net,
                input_idx=[i + off for i in cp.input_idx],
                ybar_idx=[[i + off for i in layer] for layer in cp.ybar_idx],
                yund_idx=[[i + off for i in layer] for layer in cp.yund_idx],
                alpha_idx=[[None if i is None else i + off for i in layer]
                           for layer in cp.alpha_idx],
                alpha_fixed=_copy.deepcopy(cp.alpha_fixed),
                output_idx=[i + off for i in cp.output_idx],
                bounds=cp.bounds))
        return off


def _rows_to_csr(rows, n):
    data, ri, ci = [], [], []
    for r, (coeffs, _) in enumerate(rows):
        for i, c in coeffs:
            ri.append(r)
            ci.append(i)
            data.append(c)
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))


def encode(net: ReluNetwork, bounds: NodeBounds, u_max_eff,
           system: MiConstraintSystem | None = None,
           input_vars: list[int] | None = None,
           prefix: str = "",
           eliminate_stable: bool = True) -> MiConstraintSystem:
    """Append the exact MI encoding of one network copy to a constraint system.

    The feasible set projected onto (inputs, outputs) is exactly the graph of
    the network restricted to the bound box, intersected with |out| <= u_max_eff.
    """
    u_eff = np.broadcast_to(np.asarray(u_max_eff, dtype=float).ravel(),
                            (net.output_dim,))
    if np.any(u_eff <= 0):
        raise ConfigurationError("epsilon exceeds input budget: u_max - eps <= 0")
    sys_ = system if system is not None else MiConstraintSystem()
    if input_vars is None:
        input_vars = [sys_.add_var(f"{prefix}y0_{i}", bounds.input_lo[i], bounds.input_hi[i])
                      for i in range(net.input_dim)]
    elif len(input_vars) != net.input_dim:
        raise DimensionError("input_vars length does not match network input dim")

    ybar_idx, yund_idx, alpha_idx, alpha_fixed = [], [], [], []
    prev = list(input_vars)
    for k, (W, b) in enumerate(net.layers[:-1]):
        L, U = bounds.L[k], bounds.U[k]
        yb_layer, yu_layer, a_layer, f_layer = [], [], [], []
        for j in range(W.shape[0]):
            Uj, Lj = float(U[j]), float(L[j])
            yb = sys_.add_var(f"{prefix}yb_{k + 1}_{j}", 0.0, max(Uj, 0.0))
            yu = sys_.add_var(f"{prefix}yu_{k + 1}_{j}", 0.0, max(-Lj, 0.0))
            coeffs = [(prev[i], float(W[j, i])) for i in range(len(prev))
                      if W[j, i] != 0.0]
            coeffs += [(yb, -1.0), (yu, 1.0)]
            sys_.add_eq(coeffs, -float(b[j]))
            if eliminate_stable and Lj >= 0.0:
                a_layer.append(None)
                f_layer.append(1)
            elif eliminate_stable and Uj <= 0.0:
                a_layer.append(None)
                f_layer.append(0)
            else:
                a = sys_.add_var(f"{prefix}a_{k + 1}_{j}", binary=True)
                Up, Lm = max(Uj, 0.0), min(Lj, 0.0)
                sys_.add_le([(yb, 1.0), (a, -Up)], 0.0)
                sys_.add_le([(yu, 1.0), (a, -Lm)], -Lm)
                a_layer.append(a)
                f_layer.append(None)
            yb_layer.append(yb)
            yu_layer.append(yu)
        ybar_idx.append(yb_layer)
        yund_idx.append(yu_layer)
        alpha_idx.append(a_layer)
        alpha_fixed.append(f_layer)
        prev = yb_layer

    W, b = net.layers[-1]
    output_idx = []
    for j in range(net.output_dim):
        out = sys_.add_var(f"{prefix}yK_{j}", -u_eff[j], u_eff[j])
        coeffs = [(prev[i], float(W[j, i])) for i in range(len(prev)) if W[j, i] != 0.0]
        coeffs.append((out, -1.0))
        sys_.add_eq(coeffs, -float(b[j]))
        output_idx.append(out)

    sys_.copies.append(EncodedCopy(
        net=net, input_idx=list(input_vars), ybar_idx=ybar_idx, yund_idx=yund_idx,
        alpha_idx=alpha_idx, alpha_fixed=alpha_fixed, output_idx=output_idx,
        bounds=bounds))
    return sys_


@dataclass
class HorizonSystem:
    """An MPC-horizon constraint system with per-stage variable maps."""

    system: MiConstraintSystem
    stage_z_idx: list[list[int]]   # length N_p
    stage_v_idx: list[list[int]]
    terminal_z_idx: list[int]
    N_p: int


def replicate_over_horizon(stage_sys: MiConstraintSystem, N_p: int,
                           link: tuple[np.ndarray, np.ndarray]) -> HorizonSystem:
    """Chain N_p copies of a single-stage encoding with z+ = A_d z + B_d v rows.

    stage_sys must contain exactly one encoded copy whose inputs are ordered
    (z, v) with len(z) = rows(A_d).
    """
    if N_p < 1:
        raise ConfigurationError("N_p must be >= 1")
    if len(stage_sys.copies) != 1:
        raise ConfigurationError("stage system must contain exactly one encoded copy")
    A_d, B_d = link
    A_d = np.atleast_2d(np.asarray(A_d, dtype=float))
    B_d = np.asarray(B_d, dtype=float).reshape(A_d.shape[0], -1)
    n_z, m = A_d.shape[0], B_d.shape[1]
    if len(stage_sys.copies[0].input_idx) != n_z + m:
        raise DimensionError("encoded copy input dim != n_z + m")

    full = MiConstraintSystem()
    stage_z, stage_v = [], []
    for k in range(N_p):
        off = full.append_system(stage_sys, suffix=f"@{k}")
        inp = full.copies[-1].input_idx
        stage_z.append(inp[:n_z])
        stage_v.append(inp[n_z:])
    terminal = [full.add_var(f"z_{i}@{N_p}") for i in range(n_z)]
    for k in range(N_p):
        znext = stage_z[k + 1] if k + 1 < N_p else terminal
        for i in range(n_z):
            coeffs = [(stage_z[k][j], float(A_d[i, j])) for j in range(n_z)
                      if A_d[i, j] != 0.0]
            coeffs += [(stage_v[k][j], float(B_d[i, j])) for j in range(m)
                       if B_d[i, j] != 0.0]
            coeffs.append((znext[i], -1.0))
            full.add_eq(coeffs, 0.0)
    return HorizonSystem(system=full, stage_z_idx=stage_z, stage_v_idx=stage_v,
                         terminal_z_idx=terminal, N_p=N_p)
