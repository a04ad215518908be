"""Benchmark plants, their linearizing input maps, and Brunovsky-form models.

Two plants are shipped: a mass-spring-damper with Stribeck friction (2 states,
1 input) and a horizontal 1-D quadcopter (physical state (x, xdot, theta),
flat state (x, xdot, xddot)). Controllers act on the integrator-chain model;
the simulator integrates the true nonlinear right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, SingularityError

SINGULARITY_GUARD = 1e-6  # keep |zeta| at least this far from 1


def integrator_chain(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Brunovsky pair (A, B) for a single chain of n integrators."""
    A = np.diag(np.ones(n - 1), k=1)
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    return A, B


def discretize(A: np.ndarray, B: np.ndarray, t_s: float) -> tuple[np.ndarray, np.ndarray]:
    """One-step RK4 discretization of zdot = A z + B v under zero-order hold.

    For nilpotent chain-of-integrator A the fourth-order Taylor series is the
    exact matrix exponential, so this coincides with exact ZOH discretization.
    """
    if t_s < 0:
        raise ValueError("t_s must be nonnegative")
    n = A.shape[0]
    I = np.eye(n)
    Ad = I.copy()
    S = I * t_s  # RK4's held-input response: sum A^k t^{k+1}/(k+1)!, k <= 3
    P = I
    fact = 1.0
    for k in range(1, 5):
        P = P @ A
        fact *= k
        Ad = Ad + P * t_s ** k / fact
        if k <= 3:
            S = S + P * t_s ** (k + 1) / (fact * (k + 1))
    return Ad, S @ B


@dataclass(frozen=True)
class BrunovskyModel:
    A: np.ndarray
    B: np.ndarray
    t_s: float
    A_d: np.ndarray = field(init=False)
    B_d: np.ndarray = field(init=False)

    def __post_init__(self):
        Ad, Bd = discretize(self.A, self.B, self.t_s)
        object.__setattr__(self, "A_d", Ad)
        object.__setattr__(self, "B_d", Bd)


def stribeck(x):
    """Stribeck friction s(x) = (0.8 + 0.2 e^{-100|x|}) tanh(10 x) + x."""
    x = np.asarray(x, dtype=float)
    return (0.8 + 0.2 * np.exp(-100.0 * np.abs(x))) * np.tanh(10.0 * x) + x


@dataclass(frozen=True)
class MsdPlant:
    """Mass-spring-damper with Stribeck friction, |u| <= 5."""

    u_max: float = 5.0
    state_dim: int = 2
    flat_dim: int = 2
    input_dim: int = 1

    def phi(self, z, v) -> float:
        """Physical input recovering zdot2 = v: u = v + s(z2) + z1."""
        z = np.asarray(z, dtype=float).ravel()
        return float(np.asarray(v).ravel()[0] + stribeck(z[1]) + z[0])

    def phi_batch(self, pts: np.ndarray) -> np.ndarray:
        # columns: z1, z2, v
        return pts[:, 2] + stribeck(pts[:, 1]) + pts[:, 0]

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != 2:
            raise DimensionError(f"MSD state has dimension {x.shape[0]}, expected 2")
        return np.array([x[1], -float(stribeck(x[1])) - x[0] + float(u)])

    def flat_state(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).ravel().copy()

    def initial_physical(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float).ravel().copy()

    def brunovsky(self, t_s: float) -> BrunovskyModel:
        A, B = integrator_chain(2)
        return BrunovskyModel(A=A, B=B, t_s=t_s)


@dataclass(frozen=True)
class QuadPlant:
    """Horizontal 1-D quadcopter: xddot = Gam sin(theta) - gam xdot, thetadot = (u - theta)/tau."""

    Gam: float = 10.0
    gam: float = 0.3
    tau: float = 0.2
    u_max: float = 0.1745
    state_dim: int = 3   # physical (x, xdot, theta)
    flat_dim: int = 3    # flat (x, xdot, xddot)
    input_dim: int = 1

    def zeta(self, z) -> float:
        z = np.asarray(z, dtype=float).ravel()
        return (z[2] + self.gam * z[1]) / self.Gam

    def phi(self, z, v) -> float:
        """u = tau (v + gam z3) / (Gam sqrt(1 - zeta^2)) + asin(zeta)."""
        z = np.asarray(z, dtype=float).ravel()
        zeta = self.zeta(z)
        if abs(zeta) >= 1.0 - SINGULARITY_GUARD:
            raise SingularityError(
                f"|zeta| = {abs(zeta):.6g} too close to 1; flat map singular", zeta=zeta)
        v = float(np.asarray(v).ravel()[0])
        return float(self.tau * (v + self.gam * z[2])
                     / (self.Gam * np.sqrt(1.0 - zeta ** 2)) + np.arcsin(zeta))

    def phi_batch(self, pts: np.ndarray) -> np.ndarray:
        # columns: z1, z2, z3, v
        zeta = (pts[:, 2] + self.gam * pts[:, 1]) / self.Gam
        if np.any(np.abs(zeta) >= 1.0 - SINGULARITY_GUARD):
            bad = np.abs(zeta) >= 1.0 - SINGULARITY_GUARD
            raise SingularityError(
                f"batch contains {int(bad.sum())} points with |zeta| near 1",
                zeta=float(zeta[np.argmax(np.abs(zeta))]))
        return (self.tau * (pts[:, 3] + self.gam * pts[:, 2])
                / (self.Gam * np.sqrt(1.0 - zeta ** 2)) + np.arcsin(zeta))

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != 3:
            raise DimensionError(f"Quad state has dimension {x.shape[0]}, expected 3")
        pos, vel, theta = x
        return np.array([vel,
                         self.Gam * np.sin(theta) - self.gam * vel,
                         (float(u) - theta) / self.tau])

    def flat_state(self, x) -> np.ndarray:
        """Reconstruct (x, xdot, xddot) from the physical state via xddot = Gam sin(theta) - gam xdot."""
        x = np.asarray(x, dtype=float).ravel()
        return np.array([x[0], x[1], self.Gam * np.sin(x[2]) - self.gam * x[1]])

    def initial_physical(self, z) -> np.ndarray:
        """Physical state realizing a flat state: theta = asin((z3 + gam z2)/Gam)."""
        z = np.asarray(z, dtype=float).ravel()
        zeta = self.zeta(z)
        if abs(zeta) >= 1.0:
            raise SingularityError(f"flat state unreachable: |zeta| = {abs(zeta):.6g} >= 1",
                                   zeta=zeta)
        return np.array([z[0], z[1], np.arcsin(zeta)])

    def brunovsky(self, t_s: float) -> BrunovskyModel:
        A, B = integrator_chain(3)
        return BrunovskyModel(A=A, B=B, t_s=t_s)


def rk4_step(rhs, x: np.ndarray, u: float, h: float) -> np.ndarray:
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * h * k1, u)
    k3 = rhs(x + 0.5 * h * k2, u)
    k4 = rhs(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_zoh(plant, x0: np.ndarray, u: float, t_s: float, substeps: int = 10) -> np.ndarray:
    """Advance the true plant one control period under a held input."""
    x = np.asarray(x0, dtype=float).copy()
    h = t_s / substeps
    for _ in range(substeps):
        x = rk4_step(plant.rhs, x, u, h)
    return x
