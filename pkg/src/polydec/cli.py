"""Command-line front end: ``polydec <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gps
from .decomp import Decomposition
from .lqr import lqr_analysis
from .pipeline import (COLUMNS, RunConfig, env_threads, load_decompositions,
                       prepare_system, read_report, run_pipeline, write_report)
from .sim import rollout
from .systems import HORIZONS, ConfigurationError, clamp_input

VERBS = ("enumerate", "estimate", "solve", "verify", "rank", "simulate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polydec", description="Policy decomposition screening tool.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--system", help="benchmark id (cartpole, biped3, manip2, manip3) or system JSON path")
    p.add_argument("--config", help="JSON run configuration; flags override its entries")
    p.add_argument("--estimator", choices=("lqr", "ddp", "both"))
    p.add_argument("--prune", help="none, pareto or top:N")
    p.add_argument("--out", help="output directory")
    p.add_argument("--grid-scale", type=float, help="scale every grid axis: round((N-1)*s)+1 points")
    p.add_argument("--horizon", type=float, help="rollout horizon in seconds")
    p.add_argument("--dt", type=float, help="rollout time step in seconds")
    p.add_argument("--decompositions", nargs="+",
                   help="decomposition JSON documents or files (default: enumerate all pure ones)")
    p.add_argument("--no-bar", action="store_true", help="skip the input-bound LQR error bar")
    p.add_argument("--by", default="err_lqr", choices=("err_lqr", "err_ddp", "err"),
                   help="rank: column to sort by")
    p.add_argument("--decomposition", help="simulate: decomposition JSON (default: undecomposed)")
    p.add_argument("--policy", default="lqr", choices=("lqr", "grid", "ddp"), help="simulate: policy source")
    p.add_argument("--x0", help="simulate: comma-separated start state (default: S_eval corner 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    overrides = {
        "system": args.system,
        "estimator": args.estimator,
        "prune": args.prune,
        "out": args.out,
        "grid_scale": args.grid_scale,
        "horizon": args.horizon,
        "dt": args.dt,
        "decompositions": args.decompositions,
        "lqr_bar": False if args.no_bar else None,
    }
    if args.verb in ("solve", "verify"):
        overrides["solve"] = True
    if args.verb == "verify":
        overrides["verify"] = True
    if args.config:
        cfg = RunConfig.load(args.config, **overrides)
    else:
        if not args.system:
            raise ConfigurationError("--system or --config is required")
        cfg = RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict({**_asdict(cfg), "threads": env_threads(cfg.threads)})


def _asdict(cfg: RunConfig) -> dict:
    from dataclasses import fields
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _print_table(report, by: str, out=None):
    out = out or sys.stdout
    key = {"err_lqr": "r_lqr", "err_ddp": "r_ddp", "err": "r"}[by]
    rows = sorted(report.rows, key=lambda r: (r.id != 0, getattr(r, key) is None,
                                              getattr(r, key) or 0, r.id))
    out.write("\t".join(COLUMNS) + "\n")
    for r in rows:
        out.write("\t".join("" if getattr(r, c) is None else str(getattr(r, c)) for c in COLUMNS) + "\n")


def cmd_enumerate(cfg: RunConfig) -> int:
    sys_ = prepare_system(cfg)
    decs = load_decompositions(sys_, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [d.to_json() for d in decs]
    (out / "decompositions.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    for k, (d, line) in enumerate(zip(decs, lines), start=1):
        print(f"{k}\t{d.label(sys_)}\t{line}")
    print(f"{len(decs)} decompositions", file=sys.stderr)
    return 0


def cmd_rank(cfg: RunConfig, by: str) -> int:
    report = read_report(cfg.out)
    report.rank()
    write_report(report, cfg.out)
    _print_table(report, by)
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    sys_ = prepare_system(cfg)
    d = Decomposition.from_json(args.decomposition) if args.decomposition else Decomposition.full(sys_)
    x0 = (np.array([float(v) for v in args.x0.split(",")]) if args.x0
          else sys_.S_eval[:, 0].copy())
    if x0.shape != (sys_.n,):
        raise ConfigurationError(f"--x0 needs {sys_.n} comma-separated values")
    T = cfg.horizon or HORIZONS.get(sys_.name, 4.0)
    if args.policy == "lqr":
        analysis = lqr_analysis(sys_, d)
        if analysis.gain is None:
            raise ConfigurationError(f"decomposition has no LQR gain: {analysis.reason}")
        K = analysis.gain.K
        policy = lambda x: clamp_input(sys_, sys_.goal_input - sys_.state_difference(x) @ K.T)
    elif args.policy == "grid":
        composed = gps.solve_decomposition(sys_, d, cfg.grid_config())
        policy = composed
    else:
        from . import ddp
        dcfg = cfg.ddp_config()
        policy = ddp.composed_nn(sys_, ddp.build_bundles(sys_, d, dcfg))
    ro = rollout(sys_, policy, x0, T, cfg.dt)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = ro.to_csv(out / "rollout.csv")
    print(json.dumps({"rollout": str(path), "discounted_cost": ro.discounted_cost,
                      "terminated_early": ro.terminated_early, "reason": ro.reason}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "rank" and not args.system and not args.config:
            cfg = RunConfig(system="-", out=args.out or "polydec-out")
            return cmd_rank(cfg, args.by)
        cfg = config_from_args(args)
        if args.verb == "enumerate":
            return cmd_enumerate(cfg)
        if args.verb == "rank":
            return cmd_rank(cfg, args.by)
        if args.verb == "simulate":
            return cmd_simulate(cfg, args)
        report = run_pipeline(cfg, progress=lambda stage, k: logging.getLogger("polydec").info(
            "%s %s done", stage, k))
        _print_table(report, "err" if cfg.verify else ("err_ddp" if cfg.estimator == "ddp" else "err_lqr"))
        return 1 if report.failed else 0
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"polydec: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
