"""Command-line entry point: ``sensepath {gen-env,run,bench,eval,export}``.

Exit codes: 0 success, 1 invalid input, 2 some trial ran out of budget.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from . import harness
from .config import ConfigError, ExperimentConfig
from .environment import InvalidEnvironment, load_environment, save_environment
from .io import atomic_write_text, write_csv
from .loop import TrialContext, run_trial
from .occupancy import Grid3, HingeSet, WeightPosterior, export_grid
from .planner import PLANNERS

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_BUDGET = 2

log = logging.getLogger("sensepath")


def _config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if overrides:
        cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    return cfg


def _environment(args, cfg: ExperimentConfig):
    if args.env:
        return load_environment(args.env)
    return harness.benchmark_env(cfg, args.env_seed)


def cmd_gen_env(args) -> int:
    cfg = _config(args.config)
    env = harness.benchmark_env(cfg, args.seed)
    save_environment(env, args.out)
    print(f"wrote {args.out}: {len(env.targets)} targets, {len(env.target_points)} target points")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args.config)
    env = _environment(args, cfg)
    ctx = TrialContext(env, cfg)
    tic = time.perf_counter()
    result = run_trial(env, cfg, args.seed, args.planner, ctx)
    metrics = harness.export_artifacts(result, env, ctx, args.out, wall_time=args.wall_time)
    log.info("trial took %.1f s", time.perf_counter() - tic)
    arc = metrics["arc_to_95"]
    print(
        f"{result.planner} seed {args.seed}: {result.status}, "
        f"arc to {cfg.coverage_target:.0%} = {'n/a' if arc is None else f'{arc:.2f} cm'}, "
        f"total {result.total_arc_length:.2f} cm, AUPRC {metrics['auprc']:.4f}, "
        f"{result.iterations} iterations"
    )
    return EXIT_OK if result.success else EXIT_BUDGET


def cmd_bench(args) -> int:
    overrides = {}
    if args.env_seeds:
        overrides["env_seeds"] = tuple(args.env_seeds)
    if args.planners:
        overrides["planners"] = tuple(args.planners)
    cfg = _config(args.config, overrides)
    report = harness.run_benchmark(cfg, workers=args.workers)
    report.write(args.out)
    for s in report.summaries:
        print(
            f"{s.planner:>10}: arc {s.arc_mean:8.2f} +- {s.arc_std:7.2f} cm  "
            f"AUPRC {s.auprc_mean:.4f} +- {s.auprc_std:.4f}  ({s.n_success}/{s.n} reached coverage)"
        )
    return EXIT_BUDGET if report.budget_exhausted else EXIT_OK


def cmd_eval(args) -> int:
    env = load_environment(args.env)
    grid = Grid3.load(args.grid)
    score = harness.grid_auprc(grid, env)
    lat = harness.eval_lattice(env, grid.resolution)
    out = {"auprc": score, "resolution": grid.resolution, "cells": int(len(lat.labels)),
           "positive_fraction": lat.positive_fraction}
    if args.out:
        atomic_write_text(args.out, json.dumps(out, indent=1, sort_keys=True))
    print(f"AUPRC {score:.6f} over {out['cells']} cells (positive fraction {lat.positive_fraction:.4f})")
    return EXIT_OK


def cmd_export(args) -> int:
    """Re-emit grids and flat polyline tables from a finished ``run`` directory."""
    run = Path(args.run)
    trial = json.loads((run / "trial.json").read_text())
    cfg = ExperimentConfig.from_dict(trial["config"])
    if args.resolution:
        cfg = cfg.replace(eval_resolution_cm=args.resolution)
    env = load_environment(args.env)
    posterior = WeightPosterior.from_dict(json.loads((run / "posterior.json").read_text()))
    hinges = HingeSet.lattice(env.bounds, cfg.hinge_shape, gamma=cfg.kernel_gamma, bias=cfg.bias,
                              cutoff=cfg.kernel_cutoff)
    if posterior.n_features != hinges.n_features:
        raise ConfigError(f"posterior has {posterior.n_features} weights, config implies {hinges.n_features}")
    out = Path(args.out)
    export_grid(posterior, hinges, env.bounds, cfg.eval_resolution_cm).save(out / "occupancy")
    harness.export_ei_grid(posterior, hinges, env, cfg).save(out / "ei")
    polylines = json.loads((run / "trajectories.json").read_text())["iterations"]
    rows = [
        [p["iteration"], k, *(repr(float(c)) for c in xyz)]
        for p in polylines
        for k, xyz in enumerate(p["points"])
    ]
    write_csv(out / "polylines.csv", ["iteration", "index", "x", "y", "z"], rows)
    print(f"wrote {out}: occupancy/ei grids at {cfg.eval_resolution_cm} cm, {len(polylines)} polylines")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sensepath", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate a seeded synthetic environment")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("run", help="run one trial and export its artifacts")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--env", help="environment JSON file")
    src.add_argument("--env-seed", type=int, help="generate the environment from this seed")
    p.add_argument("--planner", choices=PLANNERS, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--wall-time", action="store_true", help="add per-iteration wall time (not reproducible)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="planner sweep over seeded environments")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--env-seeds", type=int, nargs="+")
    p.add_argument("--planners", nargs="+", choices=PLANNERS)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="AUPRC of a saved occupancy grid")
    p.add_argument("--grid", required=True, help="grid header (.json) written by run/export")
    p.add_argument("--env", required=True)
    p.add_argument("--out", help="optional JSON result file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="re-emit plot data from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=float)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidEnvironment, harness.DegenerateLabels, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
