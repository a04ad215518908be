"""Approximation-error bound estimation by particle swarm search.

The bound eps_i = max over the operating box of |phi_i - net_i| is located by
a seeded global particle swarm (best of several restarts), cross-checked on a
dense grid, and inflated by a 5% safety margin: the swarm only ever produces
a lower bound on the true maximum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import DomainError, SingularityError
from .relu_net import ReluNetwork

SAFETY_MARGIN = 1.05


@dataclass
class PsoConfig:
    particle_count: int = 200
    iteration_count: int = 300
    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    seed: int = 0
    restart_count: int = 5

    def __post_init__(self):
        if self.particle_count < 10:
            raise ValueError("particle_count must be >= 10")
        if min(self.inertia, self.cognitive, self.social) <= 0:
            raise ValueError("PSO coefficients must be positive")


@dataclass
class ErrorBoundReport:
    epsilon: np.ndarray           # margined bound per output component
    swarm_max: np.ndarray         # raw best swarm value per component
    maximizer: np.ndarray         # (m, d) locations of the swarm maxima
    grid_max: np.ndarray          # dense-grid cross-check per component
    margin: float = SAFETY_MARGIN

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon.tolist(),
                "swarm_max": self.swarm_max.tolist(),
                "maximizer": self.maximizer.tolist(),
                "grid_max": self.grid_max.tolist(),
                "margin": self.margin}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ErrorBoundReport":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(epsilon=np.array(doc["epsilon"]),
                   swarm_max=np.array(doc["swarm_max"]),
                   maximizer=np.array(doc["maximizer"]),
                   grid_max=np.array(doc["grid_max"]),
                   margin=doc["margin"])


def _as_box(domain) -> np.ndarray:
    box = np.atleast_2d(np.asarray(domain, dtype=float))
    if box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
        raise DomainError(f"bad search domain {box.tolist()}")
    return box


def _phi_values(phi, pts: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(phi(pts), dtype=float)
    except SingularityError as exc:
        raise DomainError(
            f"target map singular inside the search domain ({exc}); "
            "shrink the box") from exc
    return vals.reshape(pts.shape[0], -1)


def _residual(phi, net, pts: np.ndarray, comp: int) -> np.ndarray:
    return np.abs(_phi_values(phi, pts)[:, comp] - net.forward_batch(pts)[:, comp])


def grid_points_chunks(box: np.ndarray, density: int):
    """Yield chunks of a tensor grid, sliced along the first axis (memory cap)."""
    axes = [np.linspace(lo, hi, density) for lo, hi in box]
    if len(axes) == 1:
        yield axes[0][:, None]
        return
    rest = np.meshgrid(*axes[1:], indexing="ij")
    rest = np.stack([m.ravel() for m in rest], axis=1)
    for x0 in axes[0]:
        yield np.column_stack([np.full(rest.shape[0], x0), rest])


def _pso_single(phi, net, box, comp, cfg: PsoConfig, seed_seq, extra_points):
    rng = np.random.default_rng(seed_seq)
    d = box.shape[0]
    lo, hi = box[:, 0], box[:, 1]
    span = hi - lo
    sampler = qmc.LatinHypercube(d=d, seed=rng)
    X = lo + sampler.random(cfg.particle_count) * span
    if extra_points is not None and len(extra_points):
        X = np.vstack([X, np.clip(extra_points, lo, hi)])
    n = X.shape[0]
    V = rng.uniform(-0.1, 0.1, size=(n, d)) * span
    f = _residual(phi, net, X, comp)
    pbest_x, pbest_f = X.copy(), f.copy()
    g = int(np.argmax(pbest_f))
    gbest_x, gbest_f = pbest_x[g].copy(), float(pbest_f[g])
    vmax = 0.5 * span
    for _ in range(cfg.iteration_count):
        r1 = rng.random((n, d))
        r2 = rng.random((n, d))
        V = (cfg.inertia * V + cfg.cognitive * r1 * (pbest_x - X)
             + cfg.social * r2 * (gbest_x - X))
        V = np.clip(V, -vmax, vmax)
        X = np.clip(X + V, lo, hi)
        f = _residual(phi, net, X, comp)
        improved = f > pbest_f
        pbest_x[improved] = X[improved]
        pbest_f[improved] = f[improved]
        g = int(np.argmax(pbest_f))  # ties: lowest index wins
        if pbest_f[g] > gbest_f:
            gbest_x, gbest_f = pbest_x[g].copy(), float(pbest_f[g])
    return gbest_f, gbest_x


def estimate_epsilon(phi, net: ReluNetwork, domain, cfg: PsoConfig | None = None,
                     extra_points=None, check_grid_density: int = 21) -> ErrorBoundReport:
    """Bound max |phi_i - net_i| over the domain box by best-of-restarts PSO.

    extra_points: optional array of promising starts (training-grid worst
    residual points) injected into every swarm. The reported epsilon is
    max(swarm, dense grid) inflated by the 5% safety margin.
    """
    cfg = cfg or PsoConfig()
    box = _as_box(domain)
    m = net.output_dim
    swarm_max = np.zeros(m)
    maximizer = np.zeros((m, box.shape[0]))
    grid_max = np.zeros(m)
    for chunk in grid_points_chunks(box, check_grid_density):
        res = np.abs(_phi_values(phi, chunk) - net.forward_batch(chunk))
        grid_max = np.maximum(grid_max, res.max(axis=0))
    root = np.random.SeedSequence(cfg.seed)
    for comp in range(m):
        best_f, best_x = -np.inf, None
        for r in range(cfg.restart_count):
            f, x = _pso_single(phi, net, box, comp, cfg,
                               np.random.SeedSequence([cfg.seed, comp, r]),
                               extra_points)
            if f > best_f:
                best_f, best_x = f, x
        swarm_max[comp] = best_f
        maximizer[comp] = best_x
    epsilon = SAFETY_MARGIN * np.maximum(swarm_max, grid_max)
    return ErrorBoundReport(epsilon=epsilon, swarm_max=swarm_max,
                            maximizer=maximizer, grid_max=grid_max)


@dataclass
class ValidationResult:
    passed: bool
    worst_value: float
    worst_point: np.ndarray
    grid_density: int


def validate_epsilon(phi, net: ReluNetwork, domain, epsilon,
                     grid_density: int) -> ValidationResult:
    """Check |phi - net| <= epsilon on a dense tensor grid (chunked)."""
    box = _as_box(domain)
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float).ravel(),
                          (net.output_dim,))
    worst_ratio, worst_value, worst_point = -np.inf, 0.0, None
    for chunk in grid_points_chunks(box, grid_density):
        res = np.abs(_phi_values(phi, chunk) - net.forward_batch(chunk))
        ratio = res / eps
        i, j = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
        if ratio[i, j] > worst_ratio:
            worst_ratio = float(ratio[i, j])
            worst_value = float(res[i, j])
            worst_point = chunk[i].copy()
    return ValidationResult(worst_ratio <= 1.0, worst_value, worst_point,
                            grid_density)
