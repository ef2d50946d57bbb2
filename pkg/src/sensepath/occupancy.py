"""Bayesian Hilbert map: kernel logistic regression with a Gaussian weight
posterior, updated one batch at a time.

Inference uses the Jaakkola-Jordan quadratic bound on the logistic
likelihood,

    log sigma(z) >= log sigma(xi) + (z - xi)/2 - lam(xi) (z^2 - xi^2),
    lam(xi) = tanh(xi / 2) / (4 xi),

which makes the bound posterior Gaussian with

    P = diag(1 / s0) + 2 sum_n c_n lam_n x_n x_n^T
    b = m0 / s0 + sum_n c_n (y_n - 1/2) x_n,

for prior N(m0, diag s0), features x_n, labels y_n in {0, 1} and
multiplicities c_n. The stored posterior is the mean-field (diagonal)
Gaussian closest to that bound: mean ``P^-1 b`` and variances
``1 / diag(P)``. The per-datum parameters follow
``xi_n^2 = (x_n . mu)^2 + sum_j x_nj^2 s_j`` and the two updates alternate
until neither the means nor the standard deviations move by more than
``tol`` (or ``max_iters`` is reached). Only weights whose features are non-zero on
the batch take part in the solve; all others keep their prior exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg.lapack import dpotrf as potrf, dpotrs as potrs
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.special import expit

from .environment import Bounds
from .io import atomic_write_bytes, atomic_write_text

DEFAULT_HINGE_SHAPE = (17, 17, 12)  # 3468 hinge points
DEFAULT_PRIOR_VAR = 1e4
DEFAULT_CUTOFF = 1e-2
_P_MIN = float(np.nextafter(0.0, 1.0))
_P_MAX = float(np.nextafter(1.0, 0.0))


class InferenceError(FloatingPointError):
    pass


@dataclass(eq=False)
class HingeSet:
    """Fixed RBF kernel centers ``k(x, h) = exp(-gamma |x - h|^2)``.

    Kernel values below ``cutoff`` are treated as exactly zero so feature
    matrices stay sparse; ``bias`` appends a constant feature.
    """

    points: np.ndarray
    gamma: float
    bias: bool = False
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.cutoff < 1.0:
            raise ValueError(f"cutoff must be in [0, 1), got {self.cutoff}")
        self._tree = cKDTree(self.points) if len(self.points) else None

    @classmethod
    def lattice(
        cls,
        bounds: Bounds,
        shape: Sequence[int] = DEFAULT_HINGE_SHAPE,
        gamma: float | None = None,
        **kwargs,
    ) -> "HingeSet":
        """Equally spaced lattice spanning ``bounds`` (corners included).

        The default ``gamma`` makes the kernel reach ``cutoff`` one mean
        spacing away, so the support of each hinge spans two spacings.
        """
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(bounds.lo, bounds.hi, shape)]
        gz, gy, gx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        if gamma is None:
            spacing = float(np.mean([(hi - lo) / (n - 1) for lo, hi, n in zip(bounds.lo, bounds.hi, shape)]))
            cutoff = kwargs.get("cutoff", DEFAULT_CUTOFF)
            gamma = -math.log(cutoff if cutoff > 0 else DEFAULT_CUTOFF) / spacing**2
        return cls(pts, gamma, **kwargs)

    @property
    def m(self) -> int:
        return len(self.points)

    @property
    def n_features(self) -> int:
        return self.m + int(self.bias)

    @property
    def radius(self) -> float:
        if self.cutoff == 0.0:
            return math.inf
        return math.sqrt(-math.log(self.cutoff) / self.gamma)

    def kernel(self, sq_dist: np.ndarray) -> np.ndarray:
        k = np.exp(-self.gamma * sq_dist)
        if self.cutoff > 0:
            k[k < self.cutoff] = 0.0
        return k


def features(x, hinges: HingeSet) -> np.ndarray:
    """Dense feature vector of a single point (bias last)."""
    x = np.asarray(x, dtype=float).reshape(3)
    k = hinges.kernel(np.sum((hinges.points - x) ** 2, axis=1))
    return np.append(k, 1.0) if hinges.bias else k


def feature_matrix(points: np.ndarray, hinges: HingeSet) -> sp.csr_matrix:
    """Sparse (n, n_features) feature matrix."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if hinges.m == 0 or n == 0:
        k = sp.csr_matrix((n, hinges.m))
    elif math.isinf(hinges.radius):
        d2 = ((points[:, None, :] - hinges.points[None]) ** 2).sum(-1)
        k = sp.csr_matrix(hinges.kernel(d2))
    else:
        pairs = cKDTree(points).sparse_distance_matrix(
            hinges._tree, hinges.radius, output_type="ndarray"
        )
        vals = hinges.kernel(pairs["v"] ** 2)
        k = sp.csr_matrix((vals, (pairs["i"], pairs["j"])), shape=(n, hinges.m))
        k.eliminate_zeros()
    if hinges.bias:
        k = sp.hstack([k, sp.csr_matrix(np.ones((n, 1)))], format="csr")
    k.sort_indices()
    return k


@dataclass(eq=False)
class WeightPosterior:
    mu: np.ndarray
    sigma_sq: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma_sq = np.asarray(self.sigma_sq, dtype=float)
        if self.mu.shape != self.sigma_sq.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma_sq must be 1-D arrays of equal length")
        if np.any(~(self.sigma_sq > 0)):
            raise ValueError("sigma_sq must be strictly positive")

    @property
    def n_features(self) -> int:
        return len(self.mu)

    def copy(self) -> "WeightPosterior":
        return WeightPosterior(self.mu.copy(), self.sigma_sq.copy())

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma_sq": self.sigma_sq.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "WeightPosterior":
        return cls(np.asarray(data["mu"], dtype=float), np.asarray(data["sigma_sq"], dtype=float))

    def __eq__(self, other):
        return (
            isinstance(other, WeightPosterior)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.sigma_sq, other.sigma_sq)
        )


def init_posterior(m: int, prior_var: float = DEFAULT_PRIOR_VAR, bias: bool = False) -> WeightPosterior:
    """Zero-mean, high-variance prior over ``m`` hinge weights (+ bias)."""
    if not prior_var > 0:
        raise ValueError(f"prior_var must be positive, got {prior_var}")
    n = int(m) + int(bias)
    return WeightPosterior(np.zeros(n), np.full(n, float(prior_var)))


def _jj_lambda(xi: np.ndarray) -> np.ndarray:
    out = np.full_like(xi, 0.125)
    big = xi > 1e-6
    out[big] = np.tanh(xi[big] / 2.0) / (4.0 * xi[big])
    return out


def _collect(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "points") and hasattr(batch, "labels"):
        return np.atleast_2d(batch.points), np.asarray(batch.labels)
    if isinstance(batch, tuple) and len(batch) == 2 and not hasattr(batch[0], "points"):
        return np.atleast_2d(np.asarray(batch[0], dtype=float)), np.asarray(batch[1])
    parts = [_collect(b) for b in batch]
    if not parts:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate([p for p, _ in parts]), np.concatenate([y for _, y in parts])


def _dedupe(points: np.ndarray, labels: np.ndarray):
    rows = np.concatenate([points, labels[:, None].astype(float)], axis=1)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq[:, :3], uniq[:, 3], counts.astype(float)


def learn_params(
    posterior: WeightPosterior,
    batch,
    hinges: HingeSet,
    tol: float = 1e-4,
    max_iters: int = 100,
) -> WeightPosterior:
    """Fit the batch with ``posterior`` as the prior; returns a new posterior.

    ``batch`` may be a SenseBatch, a sequence of them, or ``(points, labels)``.
    Exactly repeated (point, label) pairs are merged into weighted rows.
    """
    points, labels = _collect(batch)
    if len(labels) == 0:
        raise ValueError("learn_params needs a non-empty batch")
    if posterior.mu.shape[0] != hinges.n_features:
        raise ValueError(
            f"posterior has {posterior.mu.shape[0]} weights, hinges need {hinges.n_features}"
        )
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    points, y, counts = _dedupe(points, labels)
    x_full = feature_matrix(points, hinges)
    return learn_features(posterior, x_full, y, counts, tol=tol, max_iters=max_iters)


_TRI_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _tri_pairs(k: int) -> tuple[np.ndarray, np.ndarray]:
    """All (a, b) with a <= b < k, ordered by b then a, so the first
    k'(k'+1)/2 entries are exactly the pairs for any k' <= k."""
    size = 1 << max(0, int(k - 1).bit_length())
    if size not in _TRI_CACHE:
        b = np.repeat(np.arange(size), np.arange(1, size + 1))
        a = np.arange(len(b)) - np.repeat(np.cumsum(np.arange(size)), np.arange(1, size + 1))
        _TRI_CACHE[size] = (a, b)
    return _TRI_CACHE[size]


def _pair_products(x: sp.csr_matrix) -> sp.csc_matrix:
    """Q with ``(Q @ w).reshape(A, A)`` equal to the upper triangle of
    ``x.T @ diag(w) @ x``, one column per row of ``x``. Built once per
    batch so each fixed-point step is a single SpMV. Needs sorted indices."""
    n, a = x.shape
    k = np.diff(x.indptr)
    per_row = k * (k + 1) // 2
    indptr = np.concatenate([[0], np.cumsum(per_row)])
    total = int(indptr[-1])
    ta, tb = _tri_pairs(int(k.max()) if n else 0)
    q = np.arange(total) - np.repeat(indptr[:-1], per_row)
    base = np.repeat(x.indptr[:-1], per_row)
    ea, eb = base + ta[q], base + tb[q]
    flat = x.indices[ea].astype(np.int64) * a + x.indices[eb]
    return sp.csc_matrix((x.data[ea] * x.data[eb], flat, indptr), shape=(a * a, n))


def learn_features(
    posterior: WeightPosterior,
    x_full: sp.csr_matrix,
    y: np.ndarray,
    counts: np.ndarray | None = None,
    tol: float = 1e-4,
    max_iters: int = 100,
) -> WeightPosterior:
    """Same update as ``learn_params`` on a precomputed feature matrix."""
    y = np.asarray(y, dtype=float)
    counts = np.ones(len(y)) if counts is None else np.asarray(counts, dtype=float)
    active = np.flatnonzero(x_full.getnnz(axis=0))
    out = posterior.copy()
    if len(active) == 0:
        return out
    x = x_full[:, active].tocsr()
    x.sort_indices()
    x_sq = x.multiply(x).tocsr()
    a = len(active)
    pairs = _pair_products(x)
    m0 = posterior.mu[active]
    s0 = posterior.sigma_sq[active]
    prior_prec = 1.0 / s0
    b = prior_prec * m0 + x.T @ (counts * (y - 0.5))

    diag = np.diag_indices(a)
    mu, s = m0, s0
    xi = np.sqrt((x @ mu) ** 2 + x_sq @ s)
    for _ in range(max(1, max_iters)):
        lam = _jj_lambda(xi)
        # upper triangle only, which is all the Cholesky reads
        prec = (pairs @ (2.0 * counts * lam)).reshape(a, a)
        prec[diag] += prior_prec
        s_new = 1.0 / prec[diag]
        # row-major upper == column-major lower, hence lower=1 on the transpose
        chol, info = potrf(prec.T, lower=1, clean=0, overwrite_a=0)
        if info != 0:
            raise InferenceError(f"posterior precision is not positive definite (potrf info {info})")
        mu_new, info = potrs(chol, b, lower=1)
        if not (np.all(np.isfinite(mu_new)) and np.all(np.isfinite(s_new))):
            raise InferenceError("non-finite posterior parameters during fixed-point iteration")
        # the std must settle too: with symmetric evidence mu never moves
        delta = max(float(np.max(np.abs(mu_new - mu))), float(np.max(np.abs(np.sqrt(s_new) - np.sqrt(s)))))
        mu, s = mu_new, s_new
        xi = np.sqrt((x @ mu) ** 2 + x_sq @ s)
        if delta < tol:
            break

    out.mu[active] = mu
    # variances can only shrink; guards against round-off in 1/diag
    out.sigma_sq[active] = np.minimum(s, s0)
    return out


@dataclass(frozen=True)
class OccupancyQuery:
    mean: float
    std: float
    prob: float


def moderated_sigmoid(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    p = expit(np.asarray(mean) / np.sqrt(1.0 + math.pi * np.asarray(std) ** 2 / 8.0))
    return np.clip(p, _P_MIN, _P_MAX)


def query_points(points: np.ndarray, posterior: WeightPosterior, hinges: HingeSet, chunk: int = 20000):
    """Vectorized ``query``: returns (mean, std, prob) arrays."""
    points = np.atleast_2d(points)
    means, variances = [], []
    for start in range(0, len(points), chunk):
        phi = feature_matrix(points[start : start + chunk], hinges)
        means.append(phi @ posterior.mu)
        variances.append(phi.multiply(phi) @ posterior.sigma_sq)
    mean = np.concatenate(means) if means else np.zeros(0)
    std = np.sqrt(np.concatenate(variances)) if variances else np.zeros(0)
    return mean, std, moderated_sigmoid(mean, std)


def query(x_star, posterior: WeightPosterior, hinges: HingeSet) -> OccupancyQuery:
    phi = features(x_star, hinges)
    mean = float(phi @ posterior.mu)
    std = float(math.sqrt(float(phi**2 @ posterior.sigma_sq)))
    return OccupancyQuery(mean, std, float(moderated_sigmoid(mean, std)))


# --- grids ---------------------------------------------------------------


@dataclass(eq=False)
class Grid3:
    """Values on a regular lattice of cell centers, stored (nz, ny, nx):
    flattening in C order gives x fastest and z slowest."""

    origin: np.ndarray
    resolution: float
    values: np.ndarray
    kind: str = "occupancy"

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.values = np.asarray(self.values, dtype=float)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def centers(self) -> np.ndarray:
        return lattice_centers(self.origin, self.resolution, self.shape)

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.json`` (header) and ``<stem>.bin`` (little-endian float64)."""
        stem = Path(stem)
        header = {
            "kind": self.kind,
            "origin": self.origin.tolist(),
            "resolution": self.resolution,
            "shape_zyx": list(self.shape),
            "order": "row-major, x fastest, z slowest",
            "dtype": "<f8",
            "data": stem.name + ".bin",
        }
        bin_path = stem.with_name(stem.name + ".bin")
        json_path = stem.with_name(stem.name + ".json")
        atomic_write_bytes(bin_path, self.values.astype("<f8").tobytes())
        atomic_write_text(json_path, json.dumps(header, indent=1))
        return json_path, bin_path

    @classmethod
    def load(cls, path: str | Path) -> "Grid3":
        path = Path(path)
        json_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
        header = json.loads(json_path.read_text())
        raw = (json_path.parent / header["data"]).read_bytes()
        values = np.frombuffer(raw, dtype=header["dtype"]).astype(float)
        shape = tuple(header["shape_zyx"])
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{json_path}: {values.size} values for shape {shape}")
        return cls(header["origin"], float(header["resolution"]), values.reshape(shape), header["kind"])


def lattice_shape(bounds: Bounds, resolution: float) -> tuple[int, int, int]:
    n = np.maximum(1, np.ceil(bounds.size / resolution - 1e-9).astype(int))
    return int(n[2]), int(n[1]), int(n[0])


def lattice_centers(origin: np.ndarray, resolution: float, shape_zyx: Sequence[int]) -> np.ndarray:
    nz, ny, nx = shape_zyx
    z, y, x = np.meshgrid(
        origin[2] + (np.arange(nz) + 0.5) * resolution,
        origin[1] + (np.arange(ny) + 0.5) * resolution,
        origin[0] + (np.arange(nx) + 0.5) * resolution,
        indexing="ij",
    )
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def export_grid(
    posterior: WeightPosterior, hinges: HingeSet, bounds: Bounds, resolution: float
) -> Grid3:
    """Occupancy probability at every cell center of a lattice over ``bounds``."""
    shape = lattice_shape(bounds, resolution)
    centers = lattice_centers(bounds.lo, resolution, shape)
    _, _, prob = query_points(centers, posterior, hinges)
    return Grid3(bounds.lo, resolution, prob.reshape(shape), "occupancy")


__all__: Iterable[str] = [
    "Grid3",
    "HingeSet",
    "InferenceError",
    "OccupancyQuery",
    "WeightPosterior",
    "export_grid",
    "feature_matrix",
    "features",
    "init_posterior",
    "learn_features",
    "learn_params",
    "moderated_sigmoid",
    "query",
    "query_points",
]
