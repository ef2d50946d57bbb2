"""Expected improvement over the search space and the graph quantities
derived from it: per-vertex values and per-edge costs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, ndtr

from .environment import Environment
from .graph import WorkspaceGraph
from .occupancy import HingeSet, WeightPosterior, query_points
from .sensor import ConeParams, cones_contain, slerp

DEFAULT_XI = 0.01
DEFAULT_LAMBDA = 70.0
DEFAULT_EPS = 1e-9
DEFAULT_EDGE_SAMPLES = 5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def expected_improvement(mean, std, f_plus, xi: float = DEFAULT_XI):
    """EI = (mean - f+ - xi) Phi(Z) + std phi(Z), Z = (mean - f+ - xi) / std.

    Clamped at zero; with std == 0 it reduces to max(0, mean - f+ - xi).
    Scalars in, float out; arrays in, array out.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValueError("std must be non-negative")
    gain = mean - f_plus - xi
    safe = np.where(std > 0, std, 1.0)
    # beyond |z| = 40 both terms are exactly 0 or gain in float64
    with np.errstate(over="ignore"):
        z = np.clip(gain / safe, -40.0, 40.0)
    ei = gain * ndtr(z) + std * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    ei = np.where(std > 0, ei, gain)
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass(eq=False)
class EIField:
    points: np.ndarray
    values: np.ndarray
    f_plus: float
    xi: float
    mean: np.ndarray
    std: np.ndarray


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(48)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()
# Gauss-Legendre nodes on (0, 40] for the part of sigmoid that differs from a step
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)
_TAIL_F = 20.0 * (_GL_NODES + 1.0)
_TAIL_W = 20.0 * _GL_WEIGHTS


def sigmoid_moments(mean, std):
    """Mean and std of sigmoid(f) for f ~ N(mean, std^2).

    Narrow Gaussians use Gauss-Hermite. Wide ones write sigmoid as a unit
    step plus a remainder that dies off within |f| < 40; the step has the
    closed form Phi(mean/std) and the remainder is integrated on fixed
    nodes, which stays accurate however wide the Gaussian gets.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    mean, std = np.broadcast_arrays(mean, std)
    m1 = np.empty(mean.shape)
    m2 = np.empty(mean.shape)
    narrow = std < 1.0
    p = expit(mean[narrow][:, None] + std[narrow][:, None] * _GH_NODES)
    m1[narrow] = p @ _GH_WEIGHTS
    m2[narrow] = (p * p) @ _GH_WEIGHTS

    mb, sb = mean[~narrow][:, None], std[~narrow][:, None]
    step = ndtr(mb[:, 0] / sb[:, 0])
    up, down = expit(_TAIL_F), expit(-_TAIL_F)
    dens_up = np.exp(-0.5 * ((_TAIL_F - mb) / sb) ** 2) * (_INV_SQRT_2PI / sb)
    dens_down = np.exp(-0.5 * ((-_TAIL_F - mb) / sb) ** 2) * (_INV_SQRT_2PI / sb)
    m1[~narrow] = step + (dens_up * (up - 1.0)) @ _TAIL_W + (dens_down * down) @ _TAIL_W
    m2[~narrow] = step + (dens_up * (up * up - 1.0)) @ _TAIL_W + (dens_down * down * down) @ _TAIL_W
    sd = np.sqrt(np.maximum(m2 - m1 * m1, 0.0))
    if m1.ndim == 0:
        return float(m1), float(sd)
    return m1, sd


def _stats(posterior, hinges, points, mode):
    mean, std, _ = query_points(points, posterior, hinges)
    if mode == "latent":
        return mean, std
    if mode == "prob":
        return sigmoid_moments(mean, std)
    raise ValueError(f"unknown EI statistics mode {mode!r}")


def update_ei_field(
    posterior: WeightPosterior,
    hinges: HingeSet,
    query_points_: np.ndarray,
    xi: float = DEFAULT_XI,
    stats: str = "prob",
    f_plus: float | None = None,
) -> EIField:
    """EI at every query point; f+ defaults to the best mean over the set.

    ``stats="prob"`` scores the occupancy probability sigmoid(f) (its mean
    and std under the latent Gaussian), ``"latent"`` scores f itself.
    """
    pts = np.atleast_2d(query_points_)
    mean, std = _stats(posterior, hinges, pts, stats)
    best = float(mean.max()) if f_plus is None else float(f_plus)
    return EIField(pts, expected_improvement(mean, std, best, xi), best, xi, mean, std)


class ConeIndex:
    """Which query points fall inside the cone of every vertex pose and of
    every interior sample pose along each edge.

    Geometry only, so one index serves every trial on an environment.
    """

    def __init__(
        self,
        graph: WorkspaceGraph,
        query_points_: np.ndarray,
        half_angle: float,
        depth: float,
        n_samples: int = DEFAULT_EDGE_SAMPLES,
        chunk: int = 256,
    ):
        if n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        self.query_points = np.atleast_2d(query_points_)
        self.half_angle = half_angle
        self.depth = depth
        self.n_samples = n_samples
        self.vertex = self._membership(graph.positions, graph.orientations, chunk)
        t = np.arange(1, n_samples - 1) / (n_samples - 1)
        if len(t):
            i, j = graph.edges[:, 0], graph.edges[:, 1]
            pi, pj = graph.positions[i], graph.positions[j]
            pos = pi[:, None, :] + t[None, :, None] * (pj - pi)[:, None, :]
            ori = np.empty_like(pos)
            for e in range(len(graph.edges)):
                ori[e] = slerp(graph.orientations[i[e]], graph.orientations[j[e]], t)
            self.edge = self._membership(pos.reshape(-1, 3), ori.reshape(-1, 3), chunk)
        else:
            self.edge = sp.csr_matrix((0, len(self.query_points)), dtype=bool)

    @classmethod
    def for_environment(cls, env: Environment, graph, query_points_, cone: ConeParams, n_samples=DEFAULT_EDGE_SAMPLES):
        return cls(graph, query_points_, cone.half_angle, cone.resolve_depth(env), n_samples)

    def _membership(self, apexes, axes, chunk) -> sp.csr_matrix:
        blocks = []
        for s in range(0, len(apexes), chunk):
            inside = cones_contain(
                apexes[s : s + chunk], axes[s : s + chunk], self.half_angle, self.depth, self.query_points
            )
            blocks.append(sp.csr_matrix(inside))
        if not blocks:
            return sp.csr_matrix((0, len(self.query_points)), dtype=bool)
        return sp.vstack(blocks, format="csr")


def max_over_rows(membership: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
    """Per-row maximum of ``values`` over member columns; 0 for empty rows."""
    out = np.zeros(membership.shape[0])
    indptr = membership.indptr
    nonempty = np.flatnonzero(np.diff(indptr))
    if len(nonempty) and membership.nnz:
        seg = np.maximum.reduceat(values[membership.indices], indptr[:-1][nonempty])
        out[nonempty] = seg
    return out


def compute_vertex_values(field: EIField, graph: WorkspaceGraph, index: ConeIndex) -> np.ndarray:
    """g(V) = max EI over query points inside the vertex cone (0 if none)."""
    graph.vertex_values = max_over_rows(index.vertex, field.values)
    return graph.vertex_values


@dataclass(frozen=True)
class EdgeCost:
    u_dist: float
    u_ei: float
    lam: float

    @property
    def total(self) -> float:
        return self.u_dist + self.lam * self.u_ei


def edge_cost(u_dist: float, integral: float, lam: float, eps: float = DEFAULT_EPS) -> EdgeCost:
    return EdgeCost(u_dist, 1.0 / (integral + eps), lam)


def edge_integrals(field: EIField, graph: WorkspaceGraph, index: ConeIndex, integrand: str = "cone") -> np.ndarray:
    """Trapezoid-rule line integral of per-pose EI along every edge."""
    n = index.n_samples
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    if integrand == "cone":
        ends = max_over_rows(index.vertex, field.values)
        inner = max_over_rows(index.edge, field.values).reshape(len(graph.edges), n - 2)
    elif integrand == "surface":
        raise ValueError("surface integrand needs edge_integrals_surface")
    else:
        raise ValueError(f"unknown integrand {integrand!r}")
    samples = np.column_stack([ends[i], inner, ends[j]])
    w = np.full(n, 1.0)
    w[0] = w[-1] = 0.5
    return graph.edge_length * (samples @ w) / (n - 1)


def edge_integrals_surface(
    posterior: WeightPosterior,
    hinges: HingeSet,
    field: EIField,
    graph: WorkspaceGraph,
    n_samples: int = DEFAULT_EDGE_SAMPLES,
    stats: str = "prob",
) -> np.ndarray:
    """Alternative reading: integrate EI of the surface points themselves."""
    t = np.arange(n_samples) / (n_samples - 1)
    pi = graph.positions[graph.edges[:, 0]]
    pj = graph.positions[graph.edges[:, 1]]
    pts = (pi[:, None, :] + t[None, :, None] * (pj - pi)[:, None, :]).reshape(-1, 3)
    mean, std = _stats(posterior, hinges, pts, stats)
    ei = expected_improvement(mean, std, field.f_plus, field.xi).reshape(-1, n_samples)
    w = np.full(n_samples, 1.0)
    w[0] = w[-1] = 0.5
    return graph.edge_length * (ei @ w) / (n_samples - 1)


def compute_edge_costs(
    field: EIField,
    graph: WorkspaceGraph,
    lam: float,
    index: ConeIndex,
    eps: float = DEFAULT_EPS,
    integrals: np.ndarray | None = None,
) -> np.ndarray:
    """U = U_dist + lam / (integral of EI along the edge + eps)."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if integrals is None:
        integrals = edge_integrals(field, graph, index)
    graph.u_ei = 1.0 / (integrals + eps)
    graph.edge_costs = graph.edge_length + lam * graph.u_ei
    return graph.edge_costs


def select_goal(graph: WorkspaceGraph, exclude: int | None = None) -> int:
    """Index of the largest vertex value; ties go to the lowest index."""
    values = graph.vertex_values
    if exclude is not None and len(values) > 1:
        values = values.copy()
        values[exclude] = -np.inf
    return int(np.argmax(values))
