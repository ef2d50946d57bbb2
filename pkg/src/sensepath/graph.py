"""8-connected sensing graph over the surface grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environment import Environment, SensingPose

# forward half of the 8-neighborhood; each undirected edge is listed once
_FORWARD = ((0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(eq=False)
class WorkspaceGraph:
    grid_dims: tuple[int, int]
    positions: np.ndarray
    orientations: np.ndarray
    edges: np.ndarray  # (E, 2), lower index first
    edge_length: np.ndarray
    vertex_values: np.ndarray = field(default=None)
    edge_costs: np.ndarray = field(default=None)
    u_ei: np.ndarray = field(default=None)

    def __post_init__(self):
        n, e = len(self.positions), len(self.edges)
        if self.vertex_values is None:
            self.vertex_values = np.zeros(n)
        if self.edge_costs is None:
            self.edge_costs = self.edge_length.copy()
        if self.u_ei is None:
            self.u_ei = np.zeros(e)
        # CSR adjacency: neighbors of v are nbr[indptr[v]:indptr[v+1]]
        both = np.concatenate([self.edges, self.edges[:, ::-1]])
        eid = np.concatenate([np.arange(e), np.arange(e)])
        order = np.lexsort((both[:, 1], both[:, 0]))
        self._nbr = both[order, 1]
        self._nbr_edge = eid[order]
        self._indptr = np.searchsorted(both[order, 0], np.arange(n + 1))
        # python-level lists for the search loops
        self._adj = [
            list(zip(self._nbr[a:b].tolist(), self._nbr_edge[a:b].tolist()))
            for a, b in zip(self._indptr[:-1], self._indptr[1:])
        ]

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> list[tuple[int, int]]:
        """(neighbor, edge id) pairs in ascending neighbor order."""
        return self._adj[v]

    def degree(self, v: int) -> int:
        return len(self._adj[v])

    def edge_id(self, u: int, v: int) -> int:
        for w, e in self._adj[u]:
            if w == v:
                return e
        raise KeyError(f"vertices {u} and {v} are not adjacent")

    def pose(self, v: int) -> SensingPose:
        return SensingPose(self.positions[v], self.orientations[v])

    def cell(self, v: int) -> tuple[int, int]:
        return divmod(int(v), self.grid_dims[1])

    def vertex_at(self, row: int, col: int) -> int:
        return row * self.grid_dims[1] + col

    def copy(self) -> "WorkspaceGraph":
        g = WorkspaceGraph.__new__(WorkspaceGraph)
        g.__dict__.update(self.__dict__)
        g.vertex_values = self.vertex_values.copy()
        g.edge_costs = self.edge_costs.copy()
        g.u_ei = self.u_ei.copy()
        return g


def grid_edges(rows: int, cols: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    out = []
    for dr, dc in _FORWARD:
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
        out.append(np.column_stack([(r * cols + c)[ok], (rr * cols + cc)[ok]]))
    edges = np.concatenate(out)
    edges.sort(axis=1)
    return edges[np.lexsort((edges[:, 1], edges[:, 0]))]


def build_graph(env: Environment) -> WorkspaceGraph:
    """Grid 8-connectivity with Euclidean edge lengths; values start at 0
    and edge costs at the edge length."""
    rows, cols = env.grid_dims
    edges = grid_edges(rows, cols)
    pos = env.surface_vertices
    length = np.linalg.norm(pos[edges[:, 1]] - pos[edges[:, 0]], axis=1)
    if np.any(length <= 0):
        raise ValueError("coincident adjacent surface vertices")
    return WorkspaceGraph((rows, cols), pos.copy(), env.normals.copy(), edges, length)
