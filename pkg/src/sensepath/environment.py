"""World model: organ surface, subsurface volume, and ground-truth targets.

All lengths are centimeters. The surface is a regular-grid heightfield, so
vertex ``r * cols + c`` sits at grid row ``r`` and column ``c``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

TARGET_POINTS = 500
DEFAULT_GRID = (60, 60)
DEFAULT_EXTENT = (20.0, 20.0)
DEFAULT_DEPTH = 6.0
# ground-truth radius around discrete target points when no analytic body exists
POINT_MEMBERSHIP_RADIUS = 0.1
SURFACE_CLEARANCE = 1e-6


class InvalidEnvironment(ValueError):
    """Invalid or inconsistent environment data."""


class DegenerateNeighborhoodError(ValueError):
    def __init__(self, vertices: Sequence[int]):
        self.vertices = list(vertices)
        super().__init__(
            f"{len(self.vertices)} vertex neighborhood(s) have rank < 2 "
            f"(first: {self.vertices[:10]})"
        )


@dataclass(frozen=True)
class Bounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise InvalidEnvironment("bounds must be finite")
        if np.any(self.hi <= self.lo):
            raise InvalidEnvironment(f"empty bounds {self.lo} .. {self.hi}")

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo - tol) & (points <= self.hi + tol), axis=1)

    def __eq__(self, other):
        return (
            isinstance(other, Bounds)
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )


@dataclass(frozen=True)
class SensingPose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.orientation, dtype=float).reshape(3)
        if abs(np.linalg.norm(o) - 1.0) > 1e-9:
            raise ValueError(f"orientation must be a unit vector, got |o|={np.linalg.norm(o)}")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", o)


@dataclass(eq=False)
class TargetBody:
    """Discretized target. ``center``/``radii`` describe the analytic
    axis-aligned ellipsoid when the body was generated; loaded point sets
    may omit them."""

    id: int
    points: np.ndarray
    center: np.ndarray | None = None
    radii: np.ndarray | None = None
    _tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=float).reshape(3)
            self.radii = np.asarray(self.radii, dtype=float).reshape(3)

    @property
    def analytic(self) -> bool:
        return self.center is not None and self.radii is not None

    @property
    def bounding_radius(self) -> float:
        if self.analytic:
            return float(self.radii.max())
        c = self.points.mean(axis=0)
        return float(np.linalg.norm(self.points - c, axis=1).max())

    def contains(self, points: np.ndarray, h: float = POINT_MEMBERSHIP_RADIUS) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.analytic:
            d = (points - self.center) / self.radii
            return np.einsum("ij,ij->i", d, d) <= 1.0
        if len(self.points) == 0:
            return np.zeros(len(points), dtype=bool)
        if self._tree is None:
            self._tree = cKDTree(self.points)
        dist, _ = self._tree.query(points, distance_upper_bound=h)
        return np.isfinite(dist)

    def __eq__(self, other):
        if not isinstance(other, TargetBody):
            return NotImplemented
        if self.id != other.id or not np.array_equal(self.points, other.points):
            return False
        if self.analytic != other.analytic:
            return False
        return not self.analytic or (
            np.array_equal(self.center, other.center) and np.array_equal(self.radii, other.radii)
        )


@dataclass(eq=False)
class Environment:
    grid_dims: tuple[int, int]
    surface_vertices: np.ndarray
    normals: np.ndarray
    targets: list[TargetBody]
    bounds: Bounds

    def __post_init__(self):
        self.grid_dims = (int(self.grid_dims[0]), int(self.grid_dims[1]))
        self.surface_vertices = np.asarray(self.surface_vertices, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self._target_points: np.ndarray | None = None
        self._target_tree: cKDTree | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.surface_vertices)

    @property
    def target_points(self) -> np.ndarray:
        if self._target_points is None:
            if self.targets:
                self._target_points = np.concatenate([t.points for t in self.targets])
            else:
                self._target_points = np.zeros((0, 3))
        return self._target_points

    def near_targets(self, points: np.ndarray, radius: float) -> np.ndarray:
        """True where a target point lies within ``radius``."""
        points = np.atleast_2d(points)
        if len(self.target_points) == 0:
            return np.zeros(len(points), dtype=bool)
        if self._target_tree is None:
            self._target_tree = cKDTree(self.target_points)
        dist, _ = self._target_tree.query(points, distance_upper_bound=radius)
        return np.isfinite(dist)

    def occupied(self, points: np.ndarray) -> np.ndarray:
        """Ground-truth membership in the union of target bodies."""
        points = np.atleast_2d(points)
        mask = np.zeros(len(points), dtype=bool)
        for t in self.targets:
            mask |= t.contains(points)
        return mask

    def surface_height(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of the heightfield at (x, y) locations."""
        rows, cols = self.grid_dims
        grid = self.surface_vertices.reshape(rows, cols, 3)
        x0, y0 = grid[0, 0, 0], grid[0, 0, 1]
        dx = (grid[0, -1, 0] - x0) / max(cols - 1, 1)
        dy = (grid[-1, 0, 1] - y0) / max(rows - 1, 1)
        xy = np.atleast_2d(xy)
        u = np.clip((xy[:, 0] - x0) / dx, 0, cols - 1)
        v = np.clip((xy[:, 1] - y0) / dy, 0, rows - 1)
        c0 = np.minimum(np.floor(u).astype(int), cols - 2)
        r0 = np.minimum(np.floor(v).astype(int), rows - 2)
        fu, fv = u - c0, v - r0
        z = grid[..., 2]
        return (
            z[r0, c0] * (1 - fu) * (1 - fv)
            + z[r0, c0 + 1] * fu * (1 - fv)
            + z[r0 + 1, c0] * (1 - fu) * fv
            + z[r0 + 1, c0 + 1] * fu * fv
        )

    def inside_volume(self, points: np.ndarray) -> np.ndarray:
        """Points of the search space: inside bounds and below the surface."""
        points = np.atleast_2d(points)
        return self.bounds.contains(points) & (points[:, 2] <= self.surface_height(points[:, :2]))

    def pose(self, index: int) -> SensingPose:
        return SensingPose(self.surface_vertices[index], self.normals[index])

    def validate(self) -> None:
        rows, cols = self.grid_dims
        if rows < 2 or cols < 2:
            raise InvalidEnvironment(f"grid_dims must be at least 2x2, got {self.grid_dims}")
        if len(self.surface_vertices) != rows * cols:
            raise InvalidEnvironment(
                f"{len(self.surface_vertices)} surface vertices for grid {self.grid_dims}"
            )
        if len(self.normals) != len(self.surface_vertices):
            raise InvalidEnvironment("normals and surface_vertices differ in length")
        if not np.all(np.isfinite(self.surface_vertices)) or not np.all(np.isfinite(self.normals)):
            raise InvalidEnvironment("non-finite surface data")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-9):
            raise InvalidEnvironment("normals must be unit length")
        ids = [t.id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise InvalidEnvironment(f"duplicate target ids {ids}")
        pts = self.target_points
        if len(pts) == 0:
            return
        if not np.all(np.isfinite(pts)):
            raise InvalidEnvironment("non-finite target points")
        outside = ~self.bounds.contains(pts)
        if outside.any():
            raise InvalidEnvironment(f"{int(outside.sum())} target points outside bounds")
        # each point must sit strictly on the inner side of the tangent plane
        # of its nearest surface vertex (nearest in the xy projection)
        tree = cKDTree(self.surface_vertices[:, :2])
        _, nearest = tree.query(pts[:, :2])
        depth = np.einsum(
            "ij,ij->i", pts - self.surface_vertices[nearest], self.normals[nearest]
        )
        above = depth <= SURFACE_CLEARANCE
        if above.any():
            raise InvalidEnvironment(f"{int(above.sum())} target points at or above the surface")

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.grid_dims == other.grid_dims
            and np.array_equal(self.surface_vertices, other.surface_vertices)
            and np.array_equal(self.normals, other.normals)
            and self.bounds == other.bounds
            and len(self.targets) == len(other.targets)
            and all(a == b for a, b in zip(self.targets, other.targets))
        )


def estimate_normals(
    surface_vertices: np.ndarray,
    k: int = 10,
    inward: Sequence[float] = (0.0, 0.0, -1.0),
    rank_tol: float = 1e-10,
) -> np.ndarray:
    """Unit normals from a least-squares plane through each vertex and its
    ``k`` nearest neighbors, flipped to have a non-negative component along
    ``inward``.

    Raises DegenerateNeighborhoodError listing every vertex whose
    neighborhood covariance has rank < 2.
    """
    pts = np.asarray(surface_vertices, dtype=float).reshape(-1, 3)
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    if len(pts) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} vertices, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbh = pts[idx]
    nbh = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nbh, nbh) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    bad = np.flatnonzero(evals[:, 1] <= rank_tol * np.maximum(evals[:, 2], 1e-300))
    if len(bad):
        raise DegenerateNeighborhoodError(bad.tolist())
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = normals @ np.asarray(inward, dtype=float) < 0
    normals[flip] *= -1
    return normals


def _heightfield(rng: np.random.Generator, extent: tuple[float, float]):
    n_terms = int(rng.integers(2, 5))
    amp = rng.uniform(0.3, 0.8, n_terms)
    # 0.25..1 cycles across the patch keeps the surface gently curved
    freq = rng.uniform(0.25, 1.0, (n_terms, 2)) * rng.choice([-1.0, 1.0], (n_terms, 2))
    phase = rng.uniform(0, 2 * math.pi, n_terms)
    w, h = extent

    def f(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.zeros(np.broadcast(x, y).shape)
        for a, (fx, fy), ph in zip(amp, freq, phase):
            z = z + a * np.sin(2 * math.pi * (fx * x / w + fy * y / h) + ph)
        return z

    return f


def sample_ellipsoid(rng: np.random.Generator, center, radii, n: int) -> np.ndarray:
    """Uniform samples from the solid axis-aligned ellipsoid."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return np.asarray(center) + d * r * np.asarray(radii)


def generate_synthetic(
    seed: int,
    grid_dims: tuple[int, int] = DEFAULT_GRID,
    num_targets: tuple[int, int] = (2, 4),
    target_radius_range: tuple[float, float] = (1.0, 2.0),
    extent: tuple[float, float] = DEFAULT_EXTENT,
    depth: float = DEFAULT_DEPTH,
    ellipsoids: bool = True,
    points_per_target: int = TARGET_POINTS,
    clearance: float = 0.3,
    surface_clearance: float = 1.0,
    normal_k: int = 10,
    max_retries: int = 500,
) -> Environment:
    """Seeded synthetic scene: a sinusoidal heightfield over an
    ``extent`` patch with ``depth`` cm of tissue beneath it, and randomly
    placed, randomly sized targets.

    With ``ellipsoids`` each semi-axis is drawn independently from
    ``target_radius_range`` (a degenerate range therefore gives spheres).
    Targets keep ``clearance`` from each other and from the bounds, and
    their tops stay ``surface_clearance`` below the surface.
    """
    rows, cols = (int(grid_dims[0]), int(grid_dims[1]))
    if rows < 2 or cols < 2:
        raise ValueError(f"grid_dims must be at least 2x2, got {grid_dims}")
    lo_n, hi_n = num_targets
    r_lo, r_hi = target_radius_range
    if not (0 <= lo_n <= hi_n) or not (0 < r_lo <= r_hi):
        raise ValueError("invalid target count or radius range")

    rng = np.random.default_rng(seed)
    w, h = extent
    f = _heightfield(rng, extent)
    xs = np.linspace(0.0, w, cols)
    ys = np.linspace(0.0, h, rows)
    gx, gy = np.meshgrid(xs, ys)
    gz = f(gx, gy)
    verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    bounds = Bounds((0.0, 0.0, gz.min() - depth), (w, h, gz.max()))
    normals = estimate_normals(verts, k=normal_k)

    count = int(rng.integers(lo_n, hi_n + 1))
    targets: list[TargetBody] = []
    for tid in range(count):
        for _ in range(max_retries):
            radii = (
                rng.uniform(r_lo, r_hi, 3) if ellipsoids else np.full(3, rng.uniform(r_lo, r_hi))
            )
            lo = bounds.lo + radii + clearance
            hi = bounds.hi - radii - clearance
            if np.any(hi <= lo):
                continue
            center = rng.uniform(lo, hi)
            if any(
                np.linalg.norm(center - t.center) < radii.max() + t.radii.max() + clearance
                for t in targets
            ):
                continue
            # top of the ellipsoid must clear the surface everywhere above it
            ring = _ellipsoid_shell(center, radii)
            if np.any(ring[:, 2] > f(ring[:, 0], ring[:, 1]) - surface_clearance):
                continue
            pts = sample_ellipsoid(rng, center, radii, points_per_target)
            targets.append(TargetBody(tid, pts, center, radii))
            break
        else:
            raise ValueError(
                f"could not place target {tid} below the surface after {max_retries} tries"
            )

    env = Environment((rows, cols), verts, normals, targets, bounds)
    env.validate()
    return env


def _ellipsoid_shell(center, radii, n_theta: int = 12, n_phi: int = 24) -> np.ndarray:
    th = np.linspace(0, math.pi, n_theta)
    ph = np.linspace(0, 2 * math.pi, n_phi, endpoint=False)
    t, p = np.meshgrid(th, ph)
    d = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
    return (center + d.reshape(-1, 3) * radii)


# --- serialization -------------------------------------------------------


def environment_to_dict(env: Environment) -> dict:
    targets = []
    for t in env.targets:
        item = {"id": int(t.id), "points": t.points.ravel().tolist()}
        if t.analytic:
            item["center"] = t.center.tolist()
            item["radii"] = t.radii.tolist()
        targets.append(item)
    return {
        "grid_dims": list(env.grid_dims),
        "surface_vertices": env.surface_vertices.ravel().tolist(),
        "normals": env.normals.ravel().tolist(),
        "targets": targets,
        "bounds": {"lo": env.bounds.lo.tolist(), "hi": env.bounds.hi.tolist()},
    }


def environment_from_dict(data: dict) -> Environment:
    try:
        grid_dims = tuple(int(v) for v in data["grid_dims"])
        verts = np.asarray(data["surface_vertices"], dtype=float)
        normals = np.asarray(data["normals"], dtype=float)
        bounds = Bounds(data["bounds"]["lo"], data["bounds"]["hi"])
        targets = []
        for item in data["targets"]:
            pts = np.asarray(item["points"], dtype=float)
            if pts.size % 3:
                raise InvalidEnvironment(f"target {item.get('id')} has a partial point")
            targets.append(
                TargetBody(int(item["id"]), pts.reshape(-1, 3), item.get("center"), item.get("radii"))
            )
    except (KeyError, TypeError) as exc:
        raise InvalidEnvironment(f"malformed environment file: {exc!r}") from exc
    if len(grid_dims) != 2 or verts.size % 3 or normals.size % 3:
        raise InvalidEnvironment("inconsistent array sizes in environment file")
    env = Environment(grid_dims, verts.reshape(-1, 3), normals.reshape(-1, 3), targets, bounds)
    env.validate()
    return env


def save_environment(env: Environment, path: str | Path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(environment_to_dict(env)))


def load_environment(path: str | Path) -> Environment:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidEnvironment(f"{path}: not valid JSON ({exc})") from exc
    return environment_from_dict(data)
