"""Metrics, benchmark sweeps and artifact export."""
from __future__ import annotations

import json
import logging
import math
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import acquisition as acq
from .config import ExperimentConfig
from .environment import Environment, generate_synthetic
from .io import atomic_write_text, write_csv
from .loop import TrialContext, TrialResult, run_trial
from .occupancy import Grid3, HingeSet, WeightPosterior, export_grid, lattice_centers, lattice_shape

log = logging.getLogger(__name__)


class DegenerateLabels(ValueError):
    pass


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the precision-recall curve.

    Scores are swept from high to low; tied scores form one threshold
    group. The curve starts at recall 0 with the precision of the first
    group and is integrated with the trapezoid rule over recall.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DegenerateLabels("need at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order].astype(np.int64)
    # last index of every tie group
    ends = np.append(np.flatnonzero(s[1:] != s[:-1]), len(s) - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


@dataclass(eq=False)
class EvalLattice:
    """Labeled cell centers inside the search volume."""

    grid_shape: tuple[int, int, int]
    mask: np.ndarray  # flat, True where the cell center lies in the volume
    points: np.ndarray
    labels: np.ndarray

    @property
    def positive_fraction(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0


def eval_lattice(env: Environment, resolution: float) -> EvalLattice:
    shape = lattice_shape(env.bounds, resolution)
    centers = lattice_centers(env.bounds.lo, resolution, shape)
    mask = env.inside_volume(centers)
    pts = centers[mask]
    labels = env.occupied(pts).astype(np.int8)
    if labels.sum() == 0:
        raise DegenerateLabels(f"no occupied cell centers at resolution {resolution}")
    return EvalLattice(shape, mask, pts, labels)


def grid_auprc(grid: Grid3, env: Environment) -> float:
    """AUPRC of an exported occupancy grid against the ground truth."""
    lat = eval_lattice(env, grid.resolution)
    if tuple(grid.shape) != lat.grid_shape:
        raise ValueError(f"grid shape {grid.shape} does not match the environment lattice {lat.grid_shape}")
    if not np.allclose(grid.origin, env.bounds.lo):
        raise ValueError("grid origin does not match the environment bounds")
    return auprc(grid.values.ravel()[lat.mask], lat.labels)


def evaluate_map(posterior: WeightPosterior, hinges: HingeSet, env: Environment, resolution: float = 0.5) -> float:
    return grid_auprc(export_grid(posterior, hinges, env.bounds, resolution), env)


# --- benchmark -----------------------------------------------------------

TRIAL_FIELDS = (
    "planner",
    "env_seed",
    "trial_seed",
    "status",
    "arc_to_95",
    "total_arc_length",
    "auprc",
    "iterations",
    "success",
    "error",
)


@dataclass
class TrialRow:
    planner: str
    env_seed: int
    trial_seed: int
    status: str
    arc_to_95: float | None
    total_arc_length: float
    auprc: float | None
    iterations: int
    success: bool
    error: str = ""

    @property
    def arc_metric(self) -> float | None:
        """Arc length to coverage, or the whole (censored) path if the
        budget ran out first."""
        if self.error:
            return None
        return self.arc_to_95 if self.arc_to_95 is not None else self.total_arc_length

    def as_list(self) -> list:
        return [_fmt(getattr(self, k)) for k in TRIAL_FIELDS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


@dataclass
class PlannerSummary:
    planner: str
    n: int
    n_success: int
    arc_mean: float
    arc_std: float
    auprc_mean: float
    auprc_std: float


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    mean = math.fsum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def summarize(rows: Iterable[TrialRow], planners: Sequence[str]) -> list[PlannerSummary]:
    rows = list(rows)
    out = []
    for planner in planners:
        mine = [r for r in rows if r.planner == planner]
        arcs = [r.arc_metric for r in mine if r.arc_metric is not None]
        aucs = [r.auprc for r in mine if r.auprc is not None]
        am, asd = _mean_std(arcs)
        pm, psd = _mean_std(aucs)
        out.append(PlannerSummary(planner, len(mine), sum(r.success for r in mine), am, asd, pm, psd))
    return out


@dataclass
class EvalReport:
    config: ExperimentConfig
    rows: list[TrialRow] = field(default_factory=list)

    @property
    def summaries(self) -> list[PlannerSummary]:
        return summarize(self.rows, self.config.planners)

    def summary(self, planner: str) -> PlannerSummary:
        for s in self.summaries:
            if s.planner == planner:
                return s
        raise KeyError(planner)

    @property
    def budget_exhausted(self) -> bool:
        return any(not r.success for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "eval_resolution_cm": self.config.eval_resolution_cm,
            "summary": [s.__dict__ for s in self.summaries],
            "trials": [{k: getattr(r, k) for k in TRIAL_FIELDS} for r in self.rows],
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        write_csv(out / "trials.csv", TRIAL_FIELDS, (r.as_list() for r in self.rows))
        write_csv(
            out / "summary.csv",
            ["planner", "n", "n_success", "arc_mean", "arc_std", "auprc_mean", "auprc_std"],
            ([s.planner, s.n, s.n_success] + [_fmt(float(v)) for v in
             (s.arc_mean, s.arc_std, s.auprc_mean, s.auprc_std)] for s in self.summaries),
        )
        atomic_write_text(out / "report.json", json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def benchmark_env(config: ExperimentConfig, env_seed: int) -> Environment:
    return generate_synthetic(
        env_seed,
        grid_dims=config.grid_dims,
        num_targets=config.num_targets,
        target_radius_range=config.target_radius_range,
        extent=config.extent_cm,
        depth=config.depth_cm,
        normal_k=config.normal_k,
    )


def trial_row(result: TrialResult, env: Environment, ctx: TrialContext, env_seed: int, trial_seed: int) -> TrialRow:
    score = evaluate_map(result.posterior, ctx.hinges, env, ctx.config.eval_resolution_cm)
    return TrialRow(
        result.planner,
        env_seed,
        trial_seed,
        result.status,
        result.arc_to_coverage,
        result.total_arc_length,
        score,
        result.iterations,
        result.success,
    )


def _run_env(config: ExperimentConfig, env_seed: int) -> list[TrialRow]:
    """Every planner and trial seed on one environment, sharing its
    precomputed context."""
    rows = []
    try:
        env = benchmark_env(config, env_seed)
        ctx = TrialContext(env, config)
    except Exception as exc:  # recorded, never fatal for the batch
        log.warning("env %d failed: %s", env_seed, exc)
        return [
            TrialRow(p, env_seed, t, "error", None, 0.0, None, 0, False, f"{type(exc).__name__}: {exc}")
            for p in config.planners
            for t in config.trial_seeds
        ]
    for trial_seed in config.trial_seeds:
        for planner in config.planners:
            try:
                result = run_trial(env, config, (env_seed, trial_seed), planner, ctx)
                rows.append(trial_row(result, env, ctx, env_seed, trial_seed))
            except Exception as exc:
                log.debug("%s", traceback.format_exc())
                rows.append(
                    TrialRow(planner, env_seed, trial_seed, "error", None, 0.0, None, 0, False,
                             f"{type(exc).__name__}: {exc}")
                )
            log.info("env %d seed %d %s: %s", env_seed, trial_seed, planner, rows[-1].status)
    return rows


def run_benchmark(config: ExperimentConfig, workers: int | None = None) -> EvalReport:
    """Run every planner on every (environment seed, trial seed) pair.

    Planners on the same pair share the start vertex and sensing seed.
    Rows come back in (env seed, trial seed, planner) order regardless of
    the worker count.
    """
    workers = config.workers if workers is None else workers
    seeds = list(config.env_seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_env, [config] * len(seeds), seeds))
    else:
        chunks = [_run_env(config, s) for s in seeds]
    return EvalReport(config, [row for chunk in chunks for row in chunk])


# --- artifacts -----------------------------------------------------------

ITERATION_FIELDS = ("iteration", "start", "goal", "planned_length", "executed_length", "sensed_fraction")


def trajectory_polylines(result: TrialResult) -> list[dict]:
    graph = result.state.graph
    return [
        {
            "iteration": t.iteration,
            "vertices": list(t.vertices),
            "points": graph.positions[list(t.vertices)].tolist(),
            "arc_length": t.arc_length,
        }
        for t in result.trajectories
    ]


def export_artifacts(
    result: TrialResult,
    env: Environment,
    ctx: TrialContext,
    out_dir: str | Path,
    wall_time: bool = False,
    trial_seed=None,
) -> dict:
    """Write the plot data for one trial.

    Layout under ``out_dir``:

    * ``trajectories.json``  one polyline per executed iteration
    * ``iterations.csv``     per-iteration records
    * ``metrics.csv``        one summary row
    * ``occupancy.json/.bin`` occupancy probability grid
    * ``ei.json/.bin``       EI field grid for the final posterior
    * ``posterior.json``     weight means and variances
    * ``trial.json``         summary, config and the file list
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ctx.config
    res = cfg.eval_resolution_cm

    occ = export_grid(result.posterior, ctx.hinges, env.bounds, res)
    occ.save(out / "occupancy")
    score = grid_auprc(occ, env)
    ei = export_ei_grid(result.posterior, ctx.hinges, env, cfg)
    ei.save(out / "ei")

    atomic_write_text(out / "trajectories.json", json.dumps({"iterations": trajectory_polylines(result)}, indent=1))
    header = list(ITERATION_FIELDS) + (["wall_time"] if wall_time else [])
    write_csv(
        out / "iterations.csv",
        header,
        ([_fmt(getattr(r, k)) for k in header] for r in result.records),
    )
    seed_label = result.seed if trial_seed is None else trial_seed
    metrics = {
        "planner": result.planner,
        "seed": _seed_text(seed_label),
        "status": result.status,
        "arc_to_95": result.arc_to_coverage,
        "total_arc_length": result.total_arc_length,
        "sensed_fraction": result.sensed_fraction,
        "auprc": score,
        "iterations": result.iterations,
        "start_vertex": result.start_vertex,
    }
    write_csv(out / "metrics.csv", list(metrics), [[_fmt(v) for v in metrics.values()]])
    atomic_write_text(out / "posterior.json", json.dumps(result.posterior.to_dict()))
    files = sorted(p.name for p in out.iterdir() if not p.name.startswith("."))
    summary = dict(metrics, config=cfg.to_dict(), files=files + ["trial.json"])
    atomic_write_text(out / "trial.json", json.dumps(_jsonable(summary), indent=1, sort_keys=True))
    return metrics


def _seed_text(seed) -> str:
    if isinstance(seed, (tuple, list)):
        return "-".join(str(int(s)) for s in seed)
    return str(seed)


def export_ei_grid(posterior: WeightPosterior, hinges: HingeSet, env: Environment, cfg: ExperimentConfig) -> Grid3:
    """EI over the evaluation lattice, with f+ taken over that lattice."""
    shape = lattice_shape(env.bounds, cfg.eval_resolution_cm)
    centers = lattice_centers(env.bounds.lo, cfg.eval_resolution_cm, shape)
    f = acq.update_ei_field(posterior, hinges, centers, cfg.xi, cfg.ei_stats)
    return Grid3(env.bounds.lo, cfg.eval_resolution_cm, f.values.reshape(shape), "ei")


def polyline_arc_length(points: Sequence[Sequence[float]]) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(math.fsum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


__all__ = [
    "DegenerateLabels",
    "EvalLattice",
    "EvalReport",
    "PlannerSummary",
    "TrialRow",
    "auprc",
    "benchmark_env",
    "eval_lattice",
    "evaluate_map",
    "export_artifacts",
    "export_ei_grid",
    "grid_auprc",
    "polyline_arc_length",
    "run_benchmark",
    "summarize",
    "trajectory_polylines",
]
