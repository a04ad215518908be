"""Command-line front end: run single stages or the full artifact pipeline.

Exit codes: 0 success, 2 a validation or configuration check failed,
3 the closed loop aborted (controller infeasible or state left the box).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import encoder, errbound, harness, relu_net
from .errors import FlmipError
from .harness import EXIT_INFEASIBLE, EXIT_OK, EXIT_VALIDATION, PipelineError, Scenario


def _load_scenario(args) -> Scenario:
    sc = Scenario.from_file(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    return sc


def _out_dir(args, sc: Scenario) -> Path:
    out = Path(args.out_dir) if args.out_dir else Path("artifacts") / sc.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, hint: str):
    if not path.exists():
        raise FlmipError(f"missing artifact {path}; run '{hint}' first")
    return path


def cmd_train(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    harness.train_stage(sc, out)
    print(f"network written to {out / 'network.json'}")
    return EXIT_OK


def cmd_bound(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    net = relu_net.load_network(_require(out / "network.json", "flmip train"))
    _, report = harness.bound_stage(sc, net, out)
    val = harness.validation_stage(sc, net, report)
    print(f"epsilon = {report.epsilon.tolist()} "
          f"(swarm {report.swarm_max.tolist()}, grid {report.grid_max.tolist()})")
    if not val.passed:
        print(f"validation FAILED: residual {val.worst_value:.6g} at "
              f"{val.worst_point.tolist()}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"validation passed on density-{val.grid_density} grid "
          f"(worst residual {val.worst_value:.6g})")
    return EXIT_OK


def cmd_encode(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    net = relu_net.load_network(_require(out / "network.json", "flmip train"))
    report = errbound.ErrorBoundReport.load(_require(out / "epsilon.json",
                                                     "flmip bound"))
    bounds = encoder.fbbt(net, sc.training_box())
    sys_ = harness.encode_stage(sc, net, bounds, report, out)
    summary = {"variables": sys_.num_vars, "binaries": sys_.num_binaries,
               "eq_rows": sys_.num_eq_rows, "ub_rows": sys_.num_ub_rows}
    with open(out / "encoding.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_export_lp(args) -> int:
    # encode already exports system.lp; this subcommand only writes the LP file
    rc = cmd_encode(args)
    if rc == EXIT_OK:
        sc = _load_scenario(args)
        print(f"LP written to {_out_dir(args, sc) / 'system.lp'}")
    return rc


def cmd_simulate(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    net = relu_net.load_network(_require(out / "network.json", "flmip train"))
    report = errbound.ErrorBoundReport.load(_require(out / "epsilon.json",
                                                     "flmip bound"))
    log = harness.simulate(sc, net, report.epsilon)
    harness.emit_csv(log, out / "trajectory.csv")
    doc = harness.emit_report(log, out / "report.json")
    print(json.dumps(doc["solve_ms"]))
    if log.aborted:
        print(f"aborted: {log.abort_reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_pipeline(args) -> int:
    sc = _load_scenario(args)
    out = _out_dir(args, sc)
    stages = harness.pipeline(sc, out)
    print(json.dumps(stages, indent=1))
    if stages.get("aborted"):
        return EXIT_INFEASIBLE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flmip",
                                description="ReLU-surrogate MI encodings for "
                                            "feedback-linearization constraints")
    p.add_argument("--single-thread", action="store_true",
                   help="pin BLAS to one thread for reproducible timings")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, doc in [
            ("train", cmd_train, "fit the surrogate network"),
            ("bound", cmd_bound, "estimate and validate the error bound"),
            ("encode", cmd_encode, "build the MI encoding and LP export"),
            ("export-lp", cmd_export_lp, "write the encoding as an LP file"),
            ("simulate", cmd_simulate, "run the closed loop from artifacts"),
            ("pipeline", cmd_pipeline, "run every stage in order")]:
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("--scenario", required=True, help="scenario TOML file")
        sp.add_argument("--seed", type=int, default=None, help="override the seed")
        sp.add_argument("--out-dir", default=None, help="artifact directory")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.single_thread:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if exc.stage == "simulate" else EXIT_VALIDATION
    except FlmipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
