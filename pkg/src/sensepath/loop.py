"""The sense / learn / plan / replan loop for one trial."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import acquisition as acq
from .config import ExperimentConfig
from .environment import Environment, SensingPose
from .graph import WorkspaceGraph, build_graph
from .occupancy import HingeSet, WeightPosterior, init_posterior, learn_params
from .planner import Trajectory, make_trajectory, plan_path, truncate_at_threshold
from .sensor import ConeParams, CoverageTracker, SensorCone, edge_fractions, sense_at, slerp

SUCCESS = "success"
BUDGET_EXHAUSTED = "budget_exhausted"


class TrialContext:
    """Per-environment precomputation shared by every trial on it."""

    def __init__(self, env: Environment, config: ExperimentConfig):
        self.env = env
        self.config = config
        self.cone = ConeParams(config.half_angle, config.cone_depth_cm)
        self.cone_depth = self.cone.resolve_depth(env)
        self.hinges = HingeSet.lattice(
            env.bounds,
            config.hinge_shape,
            gamma=config.kernel_gamma,
            bias=config.bias,
            cutoff=config.kernel_cutoff,
        )
        self.graph = build_graph(env)
        self.step = config.sense_step_cm or float(self.graph.edge_length.min()) / 4.0
        # EI is evaluated on the hinges that lie inside the search volume
        self.query_points = self.hinges.points[env.inside_volume(self.hinges.points)]
        self.index = acq.ConeIndex(
            self.graph, self.query_points, self.cone.half_angle, self.cone_depth, config.edge_samples
        )


@dataclass
class IterationRecord:
    iteration: int
    start: int
    goal: int
    planned_length: float
    executed_length: float
    sensed_fraction: float
    wall_time: float


@dataclass
class TrialState:
    posterior: WeightPosterior
    graph: WorkspaceGraph
    coverage: CoverageTracker
    current_vertex: int
    trajectories: list[Trajectory] = field(default_factory=list)
    total_arc_length: float = 0.0
    # sensing cones in execution order (the sensed volume)
    cone_history: list[SensorCone] = field(default_factory=list)


@dataclass
class TrialResult:
    planner: str
    seed: int
    status: str
    state: TrialState
    records: list[IterationRecord]
    start_vertex: int
    arc_to_coverage: float | None
    last_field: acq.EIField | None = None

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    @property
    def posterior(self) -> WeightPosterior:
        return self.state.posterior

    @property
    def trajectories(self) -> list[Trajectory]:
        return self.state.trajectories

    @property
    def total_arc_length(self) -> float:
        return self.state.total_arc_length

    @property
    def sensed_fraction(self) -> float:
        return self.state.coverage.fraction

    @property
    def iterations(self) -> int:
        return len(self.records)


def path_poses(graph: WorkspaceGraph, traj: Trajectory, step: float):
    """Discretized poses strictly after the first vertex, each tagged with
    the arc length from the start of the trajectory."""
    out = []
    travelled = 0.0
    for (a, b), length in zip(zip(traj.vertices, traj.vertices[1:]), traj.segment_lengths):
        t = edge_fractions(length, step)[1:]
        pa, pb = graph.positions[a], graph.positions[b]
        ori = slerp(graph.orientations[a], graph.orientations[b], t)
        for tk, o in zip(t, ori):
            out.append((SensingPose(pa + tk * (pb - pa), o), travelled + tk * length))
        travelled += length
    return out


def _learn(posterior: WeightPosterior, batches, hinges: HingeSet, config: ExperimentConfig) -> WeightPosterior:
    # a short path can come back with no samples at all
    if not any(len(b) for b in batches):
        return posterior
    return learn_params(posterior, batches, hinges, config.bhm_tol, config.bhm_max_iters)


def run_trial(
    env: Environment,
    config: ExperimentConfig,
    seed: int,
    planner: str = "full",
    context: TrialContext | None = None,
) -> TrialResult:
    """One seeded run: random start, sense, learn, pick goal, plan, execute
    up to the replanning threshold, repeat until coverage or budget."""
    ctx = context or TrialContext(env, config)
    rng = np.random.default_rng(seed)
    graph = ctx.graph.copy()
    hinges = ctx.hinges
    threshold = math.inf if planner == "no_replan" else config.replan_threshold_cm

    start = int(rng.integers(graph.n_vertices))
    state = TrialState(
        init_posterior(hinges.m, config.prior_var, hinges.bias), graph, CoverageTracker(env), start
    )
    records: list[IterationRecord] = []
    arc_to_coverage: float | None = None
    field_: acq.EIField | None = None

    def sense(pose: SensingPose, arc: float):
        nonlocal arc_to_coverage
        batch = sense_at(env, pose, ctx.cone, config.free_density, rng, config.exclusion_cm)
        state.cone_history.append(batch.cone)
        frac = state.coverage.add(batch.cone)
        if arc_to_coverage is None and frac >= config.coverage_target:
            arc_to_coverage = arc
        return batch

    status = BUDGET_EXHAUSTED
    batches = [sense(graph.pose(start), 0.0)]
    for iteration in range(1, config.max_iterations + 1):
        tic = time.perf_counter()
        state.posterior = _learn(state.posterior, batches, hinges, config)
        if arc_to_coverage is not None:
            status = SUCCESS
            break
        if state.total_arc_length >= config.max_arc_cm:
            break

        field_ = acq.update_ei_field(state.posterior, hinges, ctx.query_points, config.xi, config.ei_stats)
        acq.compute_vertex_values(field_, graph, ctx.index)
        goal = acq.select_goal(graph, exclude=state.current_vertex)
        integrals = None
        if config.edge_integrand == "surface":
            integrals = acq.edge_integrals_surface(
                state.posterior, hinges, field_, graph, config.edge_samples, config.ei_stats
            )
        acq.compute_edge_costs(field_, graph, config.lam, ctx.index, config.eps, integrals)
        planned = plan_path(graph, planner, state.current_vertex, goal)
        executed = truncate_at_threshold(planned, threshold)
        executed = Trajectory(executed.vertices, executed.segment_lengths, iteration, executed.cost)

        offset = state.total_arc_length
        batches = [sense(pose, offset + arc) for pose, arc in path_poses(graph, executed, ctx.step)]
        state.trajectories.append(executed)
        state.total_arc_length += executed.arc_length
        state.current_vertex = executed.end
        records.append(
            IterationRecord(
                iteration,
                executed.start,
                goal,
                planned.arc_length,
                executed.arc_length,
                state.coverage.fraction,
                time.perf_counter() - tic,
            )
        )
        if not batches:
            # zero-length plan; nothing new to learn from
            batches = [sense(graph.pose(state.current_vertex), state.total_arc_length)]
    else:
        state.posterior = _learn(state.posterior, batches, hinges, config)
        if arc_to_coverage is not None:
            status = SUCCESS

    return TrialResult(planner, seed, status, state, records, start, arc_to_coverage, field_)


__all__ = [
    "BUDGET_EXHAUSTED",
    "IterationRecord",
    "SUCCESS",
    "TrialContext",
    "TrialResult",
    "TrialState",
    "make_trajectory",
    "path_poses",
    "run_trial",
]
