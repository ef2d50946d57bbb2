"""Noiseless cone-shaped volumetric sensor."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .environment import Environment, SensingPose

DEFAULT_HALF_ANGLE = math.radians(15.0)
DEFAULT_FREE_DENSITY = 4.0
DEFAULT_EXCLUSION = 0.05


@dataclass(frozen=True)
class ConeParams:
    half_angle: float = DEFAULT_HALF_ANGLE
    # None: reach the bottom of the environment bounds from the top
    depth: float | None = None

    def resolve_depth(self, env: Environment) -> float:
        if self.depth is not None:
            return float(self.depth)
        return float(env.bounds.hi[2] - env.bounds.lo[2])


@dataclass(frozen=True)
class SensorCone:
    apex: np.ndarray
    axis: np.ndarray
    half_angle: float
    depth: float

    def __post_init__(self):
        if not 0.0 < self.half_angle < math.pi / 2:
            raise ValueError(f"half_angle must be in (0, pi/2), got {self.half_angle}")
        if not self.depth > 0:
            raise ValueError(f"depth must be positive, got {self.depth}")
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        object.__setattr__(self, "axis", axis / np.linalg.norm(axis))
        object.__setattr__(self, "apex", np.asarray(self.apex, dtype=float).reshape(3))

    @classmethod
    def at(cls, pose: SensingPose, half_angle: float, depth: float) -> "SensorCone":
        return cls(pose.position, pose.orientation, half_angle, depth)

    @property
    def volume(self) -> float:
        return math.pi * self.depth**3 * math.tan(self.half_angle) ** 2 / 3.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        return cones_contain(self.apex[None], self.axis[None], self.half_angle, self.depth, points)[0]


def cones_contain(
    apexes: np.ndarray, axes: np.ndarray, half_angle: float, depth: float, points: np.ndarray
) -> np.ndarray:
    """Membership matrix (n_cones, n_points) for cones sharing shape."""
    points = np.atleast_2d(points)
    v = points[None, :, :] - apexes[:, None, :]
    along = np.einsum("cpi,ci->cp", v, axes)
    radial_sq = np.einsum("cpi,cpi->cp", v, v) - along**2
    limit = along * math.tan(half_angle)
    # tolerances absorb round-off for points placed exactly on the boundary
    tol = 1e-12 * (1.0 + depth)
    return (
        (along >= -tol)
        & (along <= depth + tol)
        & (radial_sq <= limit * limit + 1e-12 * (1.0 + limit * limit))
    )


def cone_contains(cone: SensorCone, p) -> bool:
    return bool(cone.contains(np.asarray(p, dtype=float).reshape(1, 3))[0])


@dataclass(frozen=True)
class LabeledSample:
    point: np.ndarray
    label: int


@dataclass(eq=False)
class SenseBatch:
    """Labeled points gathered by one sensing action (arrays, not objects)."""

    points: np.ndarray
    labels: np.ndarray
    pose: SensingPose
    cone: SensorCone | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(p, int(y)) for p, y in zip(self.points, self.labels)]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


def sample_cone(rng: np.random.Generator, cone: SensorCone, n: int) -> np.ndarray:
    """Uniform samples from the solid cone."""
    along = cone.depth * rng.uniform(size=n) ** (1.0 / 3.0)
    radius = along * math.tan(cone.half_angle) * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    e1, e2 = _orthonormal_pair(cone.axis)
    offsets = (
        along[:, None] * cone.axis
        + (radius * np.cos(theta))[:, None] * e1
        + (radius * np.sin(theta))[:, None] * e2
    )
    return cone.apex + offsets


def _orthonormal_pair(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def sense_at(
    env: Environment,
    pose: SensingPose,
    cone_params: ConeParams = ConeParams(),
    free_density: float = DEFAULT_FREE_DENSITY,
    rng: np.random.Generator | None = None,
    exclusion: float = DEFAULT_EXCLUSION,
) -> SenseBatch:
    """Every target point inside the cone (label 1) plus Poisson-many free
    samples (label 0) drawn uniformly in the cone.

    Free draws that are occupied, lie within ``exclusion`` of a target
    point, or fall outside the environment bounds are rejected, so labels
    always agree with ground truth.
    """
    rng = np.random.default_rng() if rng is None else rng
    cone = SensorCone.at(pose, cone_params.half_angle, cone_params.resolve_depth(env))
    tp = env.target_points
    pos = tp[cone.contains(tp)] if len(tp) else np.zeros((0, 3))

    n_free = int(rng.poisson(free_density * cone.volume)) if free_density > 0 else 0
    free = sample_cone(rng, cone, n_free)
    keep = env.bounds.contains(free)
    if len(tp) and keep.any():
        keep &= ~env.occupied(free)
        if exclusion > 0:
            keep &= ~env.near_targets(free, exclusion)
    free = free[keep]

    points = np.concatenate([pos, free])
    labels = np.concatenate([np.ones(len(pos), np.int8), np.zeros(len(free), np.int8)])
    return SenseBatch(points, labels, pose, cone)


def slerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Spherical interpolation between unit vectors, one row per t."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    omega = math.acos(dot)
    if omega < 1e-9:
        out = (1 - t)[:, None] * a + t[:, None] * b
    else:
        s = math.sin(omega)
        out = (np.sin((1 - t) * omega) / s)[:, None] * a + (np.sin(t * omega) / s)[:, None] * b
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def edge_fractions(length: float, step: float) -> np.ndarray:
    """Fractions 0..1 spaced at most ``step`` apart along a segment."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    n = max(1, int(math.ceil(length / step - 1e-9))) if length > 0 else 0
    if n == 0:
        return np.zeros(1)
    return np.arange(n + 1) / n


def edge_poses(start: SensingPose, end: SensingPose, step: float) -> list[SensingPose]:
    length = float(np.linalg.norm(end.position - start.position))
    t = edge_fractions(length, step)
    pos = start.position + t[:, None] * (end.position - start.position)
    ori = slerp(start.orientation, end.orientation, t)
    return [SensingPose(p, o) for p, o in zip(pos, ori)]


def sense_along(
    env: Environment,
    start: SensingPose,
    end: SensingPose,
    step: float,
    cone_params: ConeParams = ConeParams(),
    free_density: float = DEFAULT_FREE_DENSITY,
    rng: np.random.Generator | None = None,
    exclusion: float = DEFAULT_EXCLUSION,
) -> list[SenseBatch]:
    """One batch per discretized pose along the straight edge, endpoints included."""
    rng = np.random.default_rng() if rng is None else rng
    return [
        sense_at(env, pose, cone_params, free_density, rng, exclusion)
        for pose in edge_poses(start, end, step)
    ]


class CoverageTracker:
    """Incremental record of which target points some cone has seen."""

    def __init__(self, env: Environment):
        self.points = env.target_points
        self.covered = np.zeros(len(self.points), dtype=bool)

    def add(self, cone: SensorCone) -> float:
        if len(self.points):
            todo = ~self.covered
            if todo.any():
                idx = np.flatnonzero(todo)
                self.covered[idx[cone.contains(self.points[idx])]] = True
        return self.fraction

    @property
    def fraction(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(self.covered.mean())


def sensed_fraction(env: Environment, history: Iterable[SensorCone]) -> float:
    tracker = CoverageTracker(env)
    for cone in history:
        tracker.add(cone)
    return tracker.fraction


__all__: Sequence[str] = [
    "ConeParams",
    "CoverageTracker",
    "LabeledSample",
    "SenseBatch",
    "SensorCone",
    "cone_contains",
    "cones_contain",
    "edge_poses",
    "sense_along",
    "sense_at",
    "sensed_fraction",
    "slerp",
]
