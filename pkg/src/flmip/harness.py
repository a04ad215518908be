"""Closed-loop simulation, scenario files, artifact pipeline, and logging.

A scenario TOML file names the plant, the controller and its parameters, the
training directive for the surrogate network, and the loop timing. The
pipeline runs train -> node bounds -> error bound -> validation -> encode ->
simulate, writing every artifact (network/bounds/epsilon JSON, LP export,
trajectory CSV, solve-time report) into an output directory.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import encoder, errbound, relu_net
from .controllers import ClfCbfController, ClfCbfSpec, MpcController, MpcSpec
from .dynamics import MsdPlant, QuadPlant, integrate_zoh
from .errors import ConfigurationError, FlmipError
from .lp_io import export_lp
from .misolver import LinearObjective, MiProblem

RK4_SUBSTEPS = 10
FALLBACK_BUDGET = 3  # consecutive infeasible steps tolerated before aborting

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3


class PipelineError(FlmipError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Scenario:
    name: str
    plant_name: str            # "msd" | "quad1d"
    controller_name: str       # "clf_cbf" | "mpc"
    initial_state: np.ndarray  # flat coordinates
    duration: float
    t_s: float
    seed: int
    training: dict
    epsilon_cfg: dict
    controller_cfg: dict
    network_file: str | None = None

    @classmethod
    def from_file(cls, path) -> "Scenario":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        return cls.from_dict(doc, default_name=Path(path).stem)

    @classmethod
    def from_dict(cls, doc: dict, default_name: str = "scenario") -> "Scenario":
        try:
            plant = doc["plant"]
            controller = doc["controller"]
            duration = float(doc["duration"])
            t_s = float(doc["t_s"])
            z0 = np.asarray(doc["initial_state"], dtype=float)
        except KeyError as exc:
            raise ConfigurationError(f"scenario missing key {exc}") from exc
        if plant not in ("msd", "quad1d"):
            raise ConfigurationError(f"unknown plant {plant!r}")
        if controller not in ("clf_cbf", "mpc"):
            raise ConfigurationError(f"unknown controller {controller!r}")
        if duration < 0 or t_s <= 0:
            raise ConfigurationError("need duration >= 0 and t_s > 0")
        network_file = doc.get("network_file")
        if "training" not in doc and network_file is None:
            raise ConfigurationError("scenario needs [training] or network_file")
        return cls(name=doc.get("name", default_name),
                   plant_name=plant, controller_name=controller,
                   initial_state=z0, duration=duration, t_s=t_s,
                   seed=int(doc.get("seed", 0)),
                   training=doc.get("training", {}),
                   epsilon_cfg=doc.get("epsilon", {}),
                   controller_cfg=doc.get(controller, {}),
                   network_file=network_file)

    def plant(self):
        return MsdPlant() if self.plant_name == "msd" else QuadPlant()

    def training_box(self) -> list[tuple[float, float]]:
        return [tuple(ax) for ax in self.training["box"]]


@dataclass
class LogRow:
    t: float
    x_plant: np.ndarray
    z: np.ndarray
    v: np.ndarray
    u: np.ndarray
    delta: float
    status: str
    nodes: int
    solve_ms: float


@dataclass
class TrajectoryLog:
    rows: list[LogRow] = field(default_factory=list)
    predictions: list = field(default_factory=list)  # MPC per-step StepResult extras
    aborted: bool = False
    abort_reason: str = ""

    def append(self, row: LogRow):
        if self.rows and row.t <= self.rows[-1].t:
            raise ValueError("log time must be strictly increasing")
        self.rows.append(row)

    def column(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.rows])


def square_wave_ref(amplitude: float, period: float, n_z: int):
    """Piecewise-constant position reference, velocity/acceleration refs zero."""
    def ref(t: float) -> np.ndarray:
        out = np.zeros(n_z)
        out[0] = amplitude if (t % period) < period / 2.0 else -amplitude
        return out
    return ref


def _quintic_coeffs(p0, v0, a0, p_t, T):
    """Minimum-jerk polynomial from (p0, v0, a0) to rest at p_t over T seconds."""
    M = np.array([[1, 0, 0, 0, 0, 0],
                  [0, 1, 0, 0, 0, 0],
                  [0, 0, 2, 0, 0, 0],
                  [1, T, T ** 2, T ** 3, T ** 4, T ** 5],
                  [0, 1, 2 * T, 3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                  [0, 0, 2, 6 * T, 12 * T ** 2, 20 * T ** 3]], dtype=float)
    return np.linalg.solve(M, np.array([p0, v0, a0, p_t, 0.0, 0.0]))


def smoothed_square_ref(amplitude: float, period: float, n_z: int,
                        settle_time: float, z_start=None):
    """Square-wave position targets filtered into a feasible reference.

    Each target flip launches a minimum-jerk quintic from the reference's
    boundary state to rest at the new target over settle_time seconds; the
    reference then holds the target until the next flip. The returned state
    reference carries consistent position/velocity/acceleration components, so
    a jerk-limited integrator chain can track it without step discontinuities.
    The first segment starts from z_start (the plant's initial flat state) when
    given, so the initial transient is feasible too.
    """
    half = period / 2.0
    if not 0.0 < settle_time <= half:
        raise ConfigurationError("reference settle_time must lie in (0, period/2]")
    poly = np.polynomial.polynomial
    coeffs_cache: dict[int, np.ndarray] = {}

    def segment(k: int) -> np.ndarray:
        if k not in coeffs_cache:
            target = amplitude if k % 2 == 0 else -amplitude
            if k == 0 and z_start is not None:
                p0, v0, a0 = (list(z_start[:3]) + [0.0, 0.0])[:3]
            else:
                p0, v0, a0 = -target, 0.0, 0.0
            coeffs_cache[k] = _quintic_coeffs(p0, v0, a0, target, settle_time)
        return coeffs_cache[k]

    def ref(t: float) -> np.ndarray:
        k = int(t // half)
        tau = t - k * half
        target = amplitude if k % 2 == 0 else -amplitude
        out = np.zeros(n_z)
        if tau >= settle_time:
            out[0] = target
            return out
        c = segment(k)
        for d in range(min(3, n_z)):
            out[d] = poly.polyval(tau, poly.polyder(c, d) if d else c)
        return out

    return ref


def build_controller(scenario: Scenario, net, epsilon):
    plant = scenario.plant()
    u_eff = plant.u_max - np.asarray(epsilon, dtype=float).ravel()
    if np.any(u_eff <= 0):
        raise ConfigurationError("epsilon exceeds input budget: u_max - eps <= 0")
    cfg = scenario.controller_cfg
    box = scenario.training_box()
    n_z = plant.flat_dim
    if scenario.controller_name == "clf_cbf":
        model = plant.brunovsky(scenario.t_s)
        spec = ClfCbfSpec(P=np.array(cfg["P"]),
                          z_o=np.array(cfg["z_o"]), r_o=float(cfg["r_o"]),
                          kappa=float(cfg["kappa"]), beta=float(cfg["beta"]),
                          cost_mode=cfg.get("cost", "Qcost"),
                          K_fb=np.array(cfg["K_fb"]),
                          A=model.A, B=model.B,
                          v_box=tuple(box[n_z]))
        return ClfCbfController(spec, net, u_eff,
                                node_budget=cfg.get("node_budget", 1500))
    model = plant.brunovsky(scenario.t_s)
    ref = smoothed_square_ref(float(cfg.get("ref_amplitude", 1.0)),
                              float(cfg.get("ref_period", 8.0)), n_z,
                              float(cfg.get("ref_settle", 3.5)),
                              z_start=scenario.initial_state)
    spec = MpcSpec(N_p=int(cfg["N_p"]), Q=np.array(cfg["Q"]), R=np.array(cfg["R"]),
                   x_box=[tuple(ax) for ax in cfg.get("x_box", box[:n_z])],
                   v_box=tuple(box[n_z]), model=model, z_ref=ref)
    return MpcController(spec, net, u_eff,
                         node_budget=cfg.get("node_budget", 300))


def simulate(scenario: Scenario, net, epsilon) -> TrajectoryLog:
    """Closed loop: controller at rate t_s, true plant integrated with RK4 substeps."""
    plant = scenario.plant()
    controller = build_controller(scenario, net, epsilon)
    box = scenario.training_box()
    n_z = plant.flat_dim
    log = TrajectoryLog()
    x = plant.initial_physical(scenario.initial_state)
    n_steps = int(round(scenario.duration / scenario.t_s))
    prev_v = np.zeros(plant.input_dim)
    infeasible_run = 0
    for step_i in range(n_steps):
        t = step_i * scenario.t_s
        z = plant.flat_state(x)
        for i in range(n_z):
            lo, hi = box[i]
            if not lo <= z[i] <= hi:
                log.aborted = True
                log.abort_reason = (f"state left the training box at t={t:.3f}: "
                                    f"z[{i}]={z[i]:.4f} outside [{lo}, {hi}]")
                return log
        t0 = time.perf_counter()
        if scenario.controller_name == "mpc":
            result = controller.step(z, t)
        else:
            result = controller.step(z)
        ms = (time.perf_counter() - t0) * 1e3
        if result.v is None:
            infeasible_run += 1
            v = prev_v.copy()  # zero-order hold fallback
            status = "fallback"
            if infeasible_run >= FALLBACK_BUDGET:
                log.aborted = True
                log.abort_reason = (f"controller infeasible {infeasible_run} "
                                    f"consecutive steps at t={t:.3f}")
                return log
        else:
            infeasible_run = 0
            v = np.asarray(result.v, dtype=float).ravel()
            status = result.status
        u = np.atleast_1d(plant.phi(z, v))
        nodes = result.solution.node_count if result.solution else 0
        delta = result.delta if result.delta is not None else float("nan")
        log.append(LogRow(t=t, x_plant=x.copy(), z=z, v=v, u=u, delta=delta,
                          status=status, nodes=nodes, solve_ms=ms))
        log.predictions.append(result)
        x = integrate_zoh(plant, x, float(u[0]), scenario.t_s, RK4_SUBSTEPS)
        prev_v = v
    z = plant.flat_state(x)
    log.append(LogRow(t=n_steps * scenario.t_s if n_steps else 0.0,
                      x_plant=x.copy(), z=z,
                      v=np.full(plant.input_dim, np.nan),
                      u=np.full(plant.input_dim, np.nan),
                      delta=float("nan"), status="final", nodes=0, solve_ms=0.0))
    return log


def _num(v: float) -> str:
    return f"{v:.17g}"


def emit_csv(log: TrajectoryLog, path) -> None:
    if log.rows:
        n_z = len(log.rows[0].z)
        m = len(log.rows[0].v)
    else:
        n_z = m = 0
    header = (["t"] + [f"z{i + 1}" for i in range(n_z)]
              + [f"v{j + 1}" for j in range(m)] + [f"u{j + 1}" for j in range(m)]
              + ["delta", "status", "nodes", "ms"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in log.rows:
            w.writerow([_num(r.t)] + [_num(v) for v in r.z] + [_num(v) for v in r.v]
                       + [_num(v) for v in r.u]
                       + [_num(r.delta), r.status, str(r.nodes), _num(r.solve_ms)])


def parse_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def emit_report(log: TrajectoryLog, path) -> dict:
    times = [r.solve_ms for r in log.rows if r.status != "final"]
    doc = {
        "steps": len(times),
        "aborted": log.aborted,
        "abort_reason": log.abort_reason,
        "solve_ms": {"min": min(times) if times else None,
                     "max": max(times) if times else None,
                     "mean": float(np.mean(times)) if times else None},
        "statuses": {s: sum(1 for r in log.rows if r.status == s)
                     for s in sorted({r.status for r in log.rows})},
    }
    if log.rows:
        doc["final_state_norm"] = float(np.linalg.norm(log.rows[-1].z))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return doc


# ---------------------------------------------------------------------------
# pipeline stages

def train_stage(scenario: Scenario, out_dir: Path):
    plant = scenario.plant()
    tr = scenario.training
    grid = relu_net.TrainingGrid(box=scenario.training_box(),
                                 samples_per_axis=int(tr["samples_per_axis"]),
                                 target=plant.phi_batch)
    cfg = relu_net.TrainConfig(seed=scenario.seed,
                               adam_iters=int(tr.get("adam_iters", 8000)),
                               adam_lr=float(tr.get("adam_lr", 5e-3)),
                               batch_size=int(tr.get("batch_size", 8192)),
                               lbfgs_iters=int(tr.get("lbfgs_iters", 2000)),
                               restarts=int(tr.get("restarts", 1)))
    fit = relu_net.fit_regression(grid, (int(tr["K"]), int(tr["width"])), cfg)
    relu_net.save_network(fit.network, out_dir / "network.json")
    with open(out_dir / "training.json", "w") as fh:
        json.dump({"grid_mse": fit.grid_mse, "initial_mse": fit.initial_mse,
                   "restart_mses": fit.restart_mses}, fh, indent=1)
    return fit.network


def load_or_train(scenario: Scenario, out_dir: Path):
    if scenario.network_file:
        return relu_net.load_network(scenario.network_file)
    cached = out_dir / "network.json"
    if cached.exists():
        return relu_net.load_network(cached)
    return train_stage(scenario, out_dir)


def bound_stage(scenario: Scenario, net, out_dir: Path):
    plant = scenario.plant()
    box = scenario.training_box()
    bounds = encoder.fbbt(net, box)
    with open(out_dir / "bounds.json", "w") as fh:
        json.dump({"input_lo": bounds.input_lo.tolist(),
                   "input_hi": bounds.input_hi.tolist(),
                   "L": [a.tolist() for a in bounds.L],
                   "U": [a.tolist() for a in bounds.U]}, fh, indent=1)
    ecfg = scenario.epsilon_cfg
    pso = errbound.PsoConfig(
        particle_count=int(ecfg.get("particles", 200)),
        iteration_count=int(ecfg.get("iterations", 300)),
        seed=scenario.seed,
        restart_count=int(ecfg.get("restarts", 5)))
    extra = _worst_grid_points(scenario, net)
    report = errbound.estimate_epsilon(plant.phi_batch, net, box, pso,
                                       extra_points=extra)
    report.save(out_dir / "epsilon.json")
    return bounds, report


def _worst_grid_points(scenario: Scenario, net, top: int = 50):
    plant = scenario.plant()
    grid = relu_net.TrainingGrid(box=scenario.training_box(),
                                 samples_per_axis=int(scenario.training["samples_per_axis"]),
                                 target=plant.phi_batch)
    worst_pts, worst_res = [], []
    for chunk in errbound.grid_points_chunks(np.asarray(scenario.training_box()),
                                             grid.samples_per_axis):
        res = np.abs(grid.targets(chunk)[:, 0] - net.forward_batch(chunk)[:, 0])
        order = np.argsort(res)[-top:]
        worst_pts.append(chunk[order])
        worst_res.append(res[order])
    pts = np.vstack(worst_pts)
    res = np.concatenate(worst_res)
    return pts[np.argsort(res)[-top:]]


def validation_stage(scenario: Scenario, net, report):
    plant = scenario.plant()
    density = int(scenario.epsilon_cfg.get(
        "validation_density", 3 * int(scenario.training["samples_per_axis"])))
    return errbound.validate_epsilon(plant.phi_batch, net, scenario.training_box(),
                                     report.epsilon, density)


def encode_stage(scenario: Scenario, net, bounds, report, out_dir: Path):
    plant = scenario.plant()
    u_eff = plant.u_max - report.epsilon
    if np.any(u_eff <= 0):
        raise ConfigurationError("epsilon exceeds input budget: u_max - eps <= 0")
    sys_ = encoder.encode(net, bounds, u_eff)
    if scenario.controller_name == "mpc":
        hz = encoder.replicate_over_horizon(
            sys_, int(scenario.controller_cfg["N_p"]),
            (plant.brunovsky(scenario.t_s).A_d, plant.brunovsky(scenario.t_s).B_d))
        sys_ = hz.system
    export_lp(MiProblem(sys_, LinearObjective(np.zeros(sys_.num_vars))),
              out_dir / "system.lp")
    return sys_


def pipeline(scenario: Scenario, out_dir) -> dict:
    """Run all stages in order, halting on any failed validation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = {}
    try:
        net = load_or_train(scenario, out_dir)
    except Exception as exc:
        raise PipelineError("train", exc) from exc
    stages["network"] = str(out_dir / "network.json")
    try:
        bounds, report = bound_stage(scenario, net, out_dir)
    except Exception as exc:
        raise PipelineError("bound", exc) from exc
    stages["bounds"] = str(out_dir / "bounds.json")
    stages["epsilon"] = str(out_dir / "epsilon.json")
    try:
        val = validation_stage(scenario, net, report)
        if not val.passed:
            raise ConfigurationError(
                f"epsilon validation failed: residual {val.worst_value:.6g} at "
                f"{val.worst_point.tolist()} exceeds bound")
    except Exception as exc:
        raise PipelineError("validate", exc) from exc
    try:
        encode_stage(scenario, net, bounds, report, out_dir)
    except Exception as exc:
        raise PipelineError("encode", exc) from exc
    stages["lp"] = str(out_dir / "system.lp")
    try:
        log = simulate(scenario, net, report.epsilon)
    except Exception as exc:
        raise PipelineError("simulate", exc) from exc
    emit_csv(log, out_dir / "trajectory.csv")
    emit_report(log, out_dir / "report.json")
    stages["trajectory"] = str(out_dir / "trajectory.csv")
    stages["report"] = str(out_dir / "report.json")
    stages["aborted"] = log.aborted
    return stages
