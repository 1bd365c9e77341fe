"""Command-line entry point: ``emvamp {gen-matrix,run,verify,sweep,trace}``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import bench, serialize
from .diagnostics import CERTIFY_DEFAULTS, stationarity_report
from .engine import VampConfig, run
from .lmmse import LmmseWorkspace
from .problem import BgParams, MatrixSpec, build_matrix, synthesize

OUT_ENV = "EMVAMP_OUT_DIR"

PROBLEM_DEFAULTS = {"M": 256, "N": 512, "cond": 1.0, "beta": 0.1, "mu": 0.0, "tau": 1.0,
                    "snr_db": 40.0, "seed": 0}


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise SystemExit(f"cannot read {path}: {exc.strerror}")


def _out_dir(arg):
    return arg or os.environ.get(OUT_ENV) or "."


def _instance_from_config(cfg: dict):
    if "instance" in cfg:
        return serialize.instance_from_dict(serialize.load(cfg["instance"]))
    p = {**PROBLEM_DEFAULTS, **cfg.get("problem", {})}
    spec = MatrixSpec(int(p["M"]), int(p["N"]), float(p["cond"]), seed=int(p["seed"]))
    return synthesize(spec, BgParams(p["beta"], p["mu"], p["tau"]), float(p["snr_db"]))


def _vamp_config(cfg: dict, defaults: dict | None = None) -> VampConfig:
    kw = {**(defaults or {}), **cfg.get("vamp", {})}
    if cfg.get("algo", "em-vamp") == "oracle-vamp":
        kw.update(em_theta1=False, em_theta2=False)
    return VampConfig.from_dict(kw)


def cmd_gen_matrix(a) -> int:
    spec = MatrixSpec(a.m, a.n, a.cond, seed=a.seed)
    matrix = build_matrix(spec)
    serialize.dump(serialize.matrix_to_dict(matrix, spec), a.out)
    print(json.dumps({"out": a.out, "M": a.m, "N": a.n, "cond": matrix.cond,
                      "frob_sq": matrix.frob_sq}))
    return 0


def cmd_run(a) -> int:
    cfg = _load_json(a.config)
    inst = _instance_from_config(cfg)
    trace = run(inst, _vamp_config(cfg))
    out = a.out or os.path.join(_out_dir(None), "trace.csv")
    trace.write_csv(out)
    print(json.dumps({"out": out, "iterations": trace.n_iter, "converged": trace.converged,
                      "diverged": trace.diverged, "final_nmse_db": trace.final_nmse_db}))
    return 1 if trace.diverged else 0


def cmd_verify(a) -> int:
    cfg = _load_json(a.config)
    inst = _instance_from_config(cfg)
    config = _vamp_config(cfg, CERTIFY_DEFAULTS)
    trace = run(inst, config)
    rep = stationarity_report(trace.state, LmmseWorkspace(inst.matrix, inst.y), config)
    failures = rep.failures(cfg.get("tolerances"))
    payload = {"converged": trace.converged, "iterations": trace.n_iter,
               "final_nmse_db": trace.final_nmse_db, "report": rep.as_dict(),
               "failures": failures}
    print(json.dumps(payload, indent=1, default=float))
    return 0 if trace.converged and not failures else 1


def _sweep_spec(a) -> bench.SweepSpec:
    d = _load_json(a.config)
    if a.workers is not None:
        d["workers"] = a.workers
    if a.seed is not None:
        d["base_seed"] = a.seed
    return bench.SweepSpec.from_dict(d)


def cmd_sweep(a) -> int:
    spec = _sweep_spec(a)
    res = bench.sweep_condition(spec)
    paths = bench.report(res, _out_dir(a.out))
    print(json.dumps(paths))
    return 0


def cmd_trace(a) -> int:
    spec = _sweep_spec(a)
    paths = {}
    for ki in range(len(spec.kappas)):
        res = bench.trace_iterations(spec, ki)
        paths[str(spec.kappas[ki])] = bench.report_trace(res, _out_dir(a.out), f"trace_k{ki}")
    print(json.dumps(paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emvamp", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-matrix", help="draw a factored matrix and save it as JSON")
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--cond", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_matrix)

    r = sub.add_parser("run", help="run EM-VAMP or oracle VAMP on one problem")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run to convergence and print the fixed-point report")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_verify)

    for name, fn, help_ in (("sweep", cmd_sweep, "NMSE versus condition number"),
                            ("trace", cmd_trace, "NMSE versus iteration")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        s.add_argument("--workers", type=int)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
