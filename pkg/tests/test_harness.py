import json

import numpy as np
import pytest

from flmip import PipelineError, Scenario, pipeline, simulate
from flmip.harness import (emit_csv, emit_report, parse_csv,
                           smoothed_square_ref, square_wave_ref)
from flmip.harness import TrajectoryLog, LogRow
from flmip import MsdPlant, load_network
from flmip.errbound import ErrorBoundReport


def tiny_msd_doc(**overrides):
    doc = {
        "name": "msd_tiny", "plant": "msd", "controller": "clf_cbf",
        "seed": 0, "duration": 0.2, "t_s": 0.01, "initial_state": [0.0, 4.0],
        "training": {"K": 3, "width": 8, "samples_per_axis": 9,
                     "box": [[-5, 5], [-5, 5], [-10, 10]],
                     "adam_iters": 300, "lbfgs_iters": 200, "restarts": 1},
        "epsilon": {"particles": 30, "iterations": 30, "restarts": 1,
                    "validation_density": 19},
        "clf_cbf": {"P": [[4.58, 10.0], [10.0, 45.83]], "kappa": 4.0,
                    "beta": 0.001, "z_o": [1.5, 1.0], "r_o": 0.8,
                    "cost": "Qcost", "K_fb": [4.47, 3.37]},
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def tiny_artifacts(tmp_path_factory):
    out = tmp_path_factory.mktemp("msd_tiny")
    sc = Scenario.from_dict(tiny_msd_doc())
    stages = pipeline(sc, out)
    return sc, out, stages


class TestScenario:
    def test_toml_files_load(self):
        from pathlib import Path
        root = Path(__file__).resolve().parent.parent / "scenarios"
        for name in ("msd_clf_cbf.toml", "quad1d_mpc.toml"):
            sc = Scenario.from_file(root / name)
            assert sc.t_s > 0 and sc.duration > 0

    def test_missing_key_rejected(self):
        doc = tiny_msd_doc()
        del doc["t_s"]
        with pytest.raises(Exception, match="t_s"):
            Scenario.from_dict(doc)

    def test_square_wave(self):
        ref = square_wave_ref(1.0, 8.0, 3)
        assert ref(0.0)[0] == 1.0
        assert ref(3.99)[0] == 1.0
        assert ref(4.0)[0] == -1.0
        assert ref(8.0)[0] == 1.0
        assert np.allclose(ref(1.0)[1:], 0.0)

    def test_smoothed_square_reaches_and_holds_targets(self):
        ref = smoothed_square_ref(1.0, 8.0, 3, 3.5)
        # starts at rest on the opposite target, settles at the new one
        assert np.allclose(ref(0.0), [-1.0, 0.0, 0.0], atol=1e-12)
        assert np.allclose(ref(3.5), [1.0, 0.0, 0.0], atol=1e-9)
        assert np.allclose(ref(3.9), [1.0, 0.0, 0.0])
        assert np.allclose(ref(7.5), [-1.0, 0.0, 0.0], atol=1e-9)
        # continuous position/velocity/acceleration across the flip
        assert np.allclose(ref(4.0 - 1e-9), ref(4.0), atol=1e-6)

    def test_smoothed_square_consistent_derivatives(self):
        ref = smoothed_square_ref(1.0, 8.0, 3, 3.5,
                                  z_start=np.array([-0.5, -0.15, -0.2]))
        assert np.allclose(ref(0.0), [-0.5, -0.15, -0.2], atol=1e-12)
        h = 1e-5
        for t in (0.7, 1.9, 3.1, 4.6, 6.2):
            pos_rate = (ref(t + h)[0] - ref(t - h)[0]) / (2 * h)
            vel_rate = (ref(t + h)[1] - ref(t - h)[1]) / (2 * h)
            assert pos_rate == pytest.approx(ref(t)[1], abs=1e-5)
            assert vel_rate == pytest.approx(ref(t)[2], abs=1e-4)

    def test_smoothed_square_rejects_slow_settle(self):
        with pytest.raises(Exception, match="settle"):
            smoothed_square_ref(1.0, 8.0, 3, 4.5)


class TestPipeline:
    def test_all_artifacts_produced(self, tiny_artifacts):
        _, out, stages = tiny_artifacts
        from pathlib import Path
        for key in ("network", "bounds", "epsilon", "lp", "trajectory", "report"):
            assert Path(stages[key]).exists()
        assert not stages["aborted"]

    def test_pretrained_network_skips_training(self, tiny_artifacts, tmp_path):
        sc0, out, _ = tiny_artifacts
        doc = tiny_msd_doc(duration=0.05)
        doc["network_file"] = str(out / "network.json")
        sc = Scenario.from_dict(doc)
        stages = pipeline(sc, tmp_path / "reuse")
        assert not (tmp_path / "reuse" / "training.json").exists()
        assert not stages["aborted"]

    def test_epsilon_exceeding_budget_halts_at_encode(self, tiny_artifacts,
                                                      tmp_path):
        _, out, _ = tiny_artifacts
        net = load_network(out / "network.json")
        rep = ErrorBoundReport.load(out / "epsilon.json")
        doc = tiny_msd_doc()
        doc["network_file"] = str(out / "network.json")
        sc = Scenario.from_dict(doc)
        # hand the simulator an epsilon larger than u_max
        d = tmp_path / "bad"
        d.mkdir()
        rep.epsilon = np.array([10.0])
        rep.save(d / "epsilon.json")
        with pytest.raises(Exception, match="exceeds input budget"):
            simulate(sc, net, rep.epsilon)

    def test_failed_validation_names_stage(self, tmp_path, monkeypatch):
        import flmip.harness as hmod
        doc = tiny_msd_doc()
        sc = Scenario.from_dict(doc)

        def broken(*a, **k):
            from flmip.errbound import ValidationResult
            return ValidationResult(False, 99.0, np.zeros(3), 3)
        monkeypatch.setattr(hmod, "validation_stage", broken)
        with pytest.raises(PipelineError, match="validate"):
            pipeline(sc, tmp_path / "halt")


class TestSimulate:
    def test_zero_duration_single_row(self, tiny_artifacts):
        sc0, out, _ = tiny_artifacts
        doc = tiny_msd_doc(duration=0.0)
        doc["network_file"] = str(out / "network.json")
        sc = Scenario.from_dict(doc)
        rep = ErrorBoundReport.load(out / "epsilon.json")
        log = simulate(sc, load_network(out / "network.json"), rep.epsilon)
        assert len(log.rows) == 1
        assert log.rows[0].t == 0.0

    def test_loop_consistency(self, tiny_artifacts):
        sc, out, _ = tiny_artifacts
        plant = MsdPlant()
        rows = parse_csv(out / "trajectory.csv")
        for row in rows:
            if row["status"] == "final":
                continue
            z = np.array([float(row["z1"]), float(row["z2"])])
            v = float(row["v1"])
            assert plant.phi(z, v) == pytest.approx(float(row["u1"]), abs=1e-12)

    def test_time_strictly_increasing(self, tiny_artifacts):
        _, out, _ = tiny_artifacts
        ts = [float(r["t"]) for r in parse_csv(out / "trajectory.csv")]
        assert all(b > a for a, b in zip(ts, ts[1:]))

    def test_determinism_bit_identical_csv(self, tiny_artifacts, tmp_path):
        sc, out, _ = tiny_artifacts
        net = load_network(out / "network.json")
        rep = ErrorBoundReport.load(out / "epsilon.json")
        log1 = simulate(sc, net, rep.epsilon)
        log2 = simulate(sc, net, rep.epsilon)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_csv(log1, p1)
        emit_csv(log2, p2)
        t1 = _strip_ms(p1.read_text())
        t2 = _strip_ms(p2.read_text())
        assert t1 == t2


def _strip_ms(text):
    # wall-clock columns differ run to run; everything else must be identical
    return [",".join(line.split(",")[:-1]) for line in text.splitlines()]


class TestEmit:
    def test_empty_log_header_only(self, tmp_path):
        p = tmp_path / "empty.csv"
        emit_csv(TrajectoryLog(), p)
        lines = p.read_text().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("t,")

    def test_csv_round_trip_precision(self, tmp_path):
        log = TrajectoryLog()
        log.append(LogRow(t=0.0, x_plant=np.zeros(2),
                          z=np.array([1.0 / 3.0, -2.0 / 7.0]),
                          v=np.array([np.pi]), u=np.array([np.e]),
                          delta=0.125, status="optimal", nodes=3, solve_ms=1.5))
        p = tmp_path / "rt.csv"
        emit_csv(log, p)
        row = parse_csv(p)[0]
        assert float(row["z1"]) == 1.0 / 3.0
        assert float(row["z2"]) == -2.0 / 7.0
        assert float(row["v1"]) == np.pi
        assert float(row["u1"]) == np.e

    def test_report_shape(self, tiny_artifacts):
        _, out, _ = tiny_artifacts
        doc = json.loads((out / "report.json").read_text())
        assert set(doc["solve_ms"]) == {"min", "max", "mean"}
        assert doc["solve_ms"]["min"] <= doc["solve_ms"]["mean"] <= doc["solve_ms"]["max"]
