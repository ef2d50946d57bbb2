"""Path search on the workspace graph: A* (full cost or distance only),
Dijkstra on the EI sub-cost, and the projected straight-line planner."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .graph import WorkspaceGraph

COST_MODES = ("full", "distance_only")


class UnreachableGoal(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    vertices: tuple[int, ...]
    segment_lengths: tuple[float, ...] = ()
    iteration: int = 0
    cost: float = 0.0

    @property
    def arc_length(self) -> float:
        return float(math.fsum(self.segment_lengths))

    @property
    def start(self) -> int:
        return self.vertices[0]

    @property
    def end(self) -> int:
        return self.vertices[-1]

    def __len__(self) -> int:
        return len(self.vertices)


def make_trajectory(graph: WorkspaceGraph, vertices: Sequence[int], iteration: int = 0, cost: float = 0.0) -> Trajectory:
    """Build a trajectory, checking adjacency along the way."""
    vertices = tuple(int(v) for v in vertices)
    seg = tuple(float(graph.edge_length[graph.edge_id(a, b)]) for a, b in zip(vertices, vertices[1:]))
    return Trajectory(vertices, seg, iteration, cost)


def path_cost(graph: WorkspaceGraph, vertices: Sequence[int], costs: np.ndarray) -> float:
    total = 0.0
    for a, b in zip(vertices, vertices[1:]):
        total += float(costs[graph.edge_id(a, b)])
    return total


def _reconstruct(parent: dict, goal: int) -> list[int]:
    path = [goal]
    while path[-1] in parent:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def astar(
    graph: WorkspaceGraph,
    start: int,
    goal: int,
    cost_mode: str = "full",
    trace: list | None = None,
) -> Trajectory:
    """A* with the straight-line distance to the goal as heuristic.

    ``full`` searches on ``graph.edge_costs``; ``distance_only`` on the
    edge lengths. Both costs are bounded below by the Euclidean edge
    length, so the heuristic is consistent and the first expansion of the
    goal is optimal. Frontier ties: lower f, then higher g, then lower
    vertex index. If ``trace`` is a list, each expanded vertex is appended
    as ``(vertex, h(vertex))``.
    """
    if cost_mode == "full":
        costs = graph.edge_costs
    elif cost_mode == "distance_only":
        costs = graph.edge_length
    else:
        raise ValueError(f"cost_mode must be one of {COST_MODES}, got {cost_mode!r}")
    costs = costs.tolist()
    h = np.linalg.norm(graph.positions - graph.positions[goal], axis=1).tolist()

    best = {start: 0.0}
    parent: dict[int, int] = {}
    closed = bytearray(graph.n_vertices)
    heap = [(h[start], -0.0, start)]
    while heap:
        _, neg_g, v = heapq.heappop(heap)
        if closed[v]:
            continue
        closed[v] = 1
        if trace is not None:
            trace.append((v, h[v]))
        if v == goal:
            return make_trajectory(graph, _reconstruct(parent, goal), cost=-neg_g)
        gv = -neg_g
        for w, e in graph.neighbors(v):
            if closed[w]:
                continue
            ng = gv + costs[e]
            if ng < best.get(w, math.inf):
                best[w] = ng
                parent[w] = v
                heapq.heappush(heap, (ng + h[w], -ng, w))
    raise UnreachableGoal(f"no path from {start} to {goal}")


def dijkstra(graph: WorkspaceGraph, start: int, goal: int, costs: np.ndarray) -> Trajectory:
    costs = np.asarray(costs).tolist()
    dist = {start: 0.0}
    parent: dict[int, int] = {}
    closed = bytearray(graph.n_vertices)
    heap = [(0.0, start)]
    while heap:
        d, v = heapq.heappop(heap)
        if closed[v]:
            continue
        closed[v] = 1
        if v == goal:
            return make_trajectory(graph, _reconstruct(parent, goal), cost=d)
        for w, e in graph.neighbors(v):
            if closed[w]:
                continue
            nd = d + costs[e]
            if nd < dist.get(w, math.inf):
                dist[w] = nd
                parent[w] = v
                heapq.heappush(heap, (nd, w))
    raise UnreachableGoal(f"no path from {start} to {goal}")


def dijkstra_ei(graph: WorkspaceGraph, start: int, goal: int) -> Trajectory:
    """Minimum total EI sub-cost path (no distance term, no heuristic)."""
    return dijkstra(graph, start, goal, graph.u_ei)


def straight_line(graph: WorkspaceGraph, start: int, goal: int) -> Trajectory:
    """Rasterize the start-goal segment in grid coordinates to nearest
    vertices, then stitch any gaps with shortest grid walks."""
    r0, c0 = graph.cell(start)
    r1, c1 = graph.cell(goal)
    steps = 2 * max(abs(r1 - r0), abs(c1 - c0))
    if steps == 0:
        return make_trajectory(graph, [start])
    t = np.arange(steps + 1) / steps
    rows = np.floor(r0 + t * (r1 - r0) + 0.5).astype(int)
    cols = np.floor(c0 + t * (c1 - c0) + 0.5).astype(int)
    cells = [(int(rows[0]), int(cols[0]))]
    for rc in zip(rows.tolist(), cols.tolist()):
        if rc != cells[-1]:
            cells.extend(_grid_walk(cells[-1], rc)[1:])
    return make_trajectory(graph, [graph.vertex_at(r, c) for r, c in cells])


def _grid_walk(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Shortest 8-connected walk: diagonal steps first, then straight."""
    out = [a]
    r, c = a
    while (r, c) != b:
        r += (b[0] > r) - (b[0] < r)
        c += (b[1] > c) - (b[1] < c)
        out.append((r, c))
    return out


def truncate_at_threshold(traj: Trajectory, threshold: float) -> Trajectory:
    """Shortest prefix whose arc length reaches ``threshold`` (whole path if
    it never does). The last vertex kept is where the next plan starts."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    total = 0.0
    for k, seg in enumerate(traj.segment_lengths):
        total += seg
        if total >= threshold:
            return replace(
                traj, vertices=traj.vertices[: k + 2], segment_lengths=traj.segment_lengths[: k + 1]
            )
    return traj


PLANNERS = ("full", "no_replan", "SL", "AD", "DE")


def plan_path(graph: WorkspaceGraph, planner: str, start: int, goal: int) -> Trajectory:
    if planner in ("full", "no_replan"):
        return astar(graph, start, goal, "full")
    if planner == "AD":
        return astar(graph, start, goal, "distance_only")
    if planner == "DE":
        return dijkstra_ei(graph, start, goal)
    if planner == "SL":
        return straight_line(graph, start, goal)
    raise ValueError(f"unknown planner {planner!r}; expected one of {PLANNERS}")
