import numpy as np
import pytest

from sensepath import ExperimentConfig, generate_synthetic
from sensepath.environment import Bounds, Environment, TargetBody, sample_ellipsoid


def small_config(**kw) -> ExperimentConfig:
    base = dict(
        grid_dims=(14, 14),
        extent_cm=(8.0, 8.0),
        depth_cm=4.0,
        hinge_shape=(7, 7, 5),
        num_targets=(1, 2),
        target_radius_range=(0.8, 1.1),
        max_iterations=40,
        max_arc_cm=150.0,
        bhm_max_iters=30,
        env_seeds=(0, 1),
        planners=("full", "SL"),
        eval_resolution_cm=0.5,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def small_env(seed: int = 0, cfg: ExperimentConfig | None = None):
    cfg = cfg or small_config()
    return generate_synthetic(
        seed,
        grid_dims=cfg.grid_dims,
        num_targets=cfg.num_targets,
        target_radius_range=cfg.target_radius_range,
        extent=cfg.extent_cm,
        depth=cfg.depth_cm,
    )


def flat_env(rows=9, cols=9, spacing=0.5, depth=4.0, targets=(), seed=0) -> Environment:
    """Flat surface at z = 0 looking straight down; targets given as
    (center, radius) spheres."""
    xs = np.arange(cols) * spacing
    ys = np.arange(rows) * spacing
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    normals = np.tile([0.0, 0.0, -1.0], (rows * cols, 1))
    rng = np.random.default_rng(seed)
    bodies = []
    for i, (c, r) in enumerate(targets):
        radii = np.full(3, float(r))
        bodies.append(TargetBody(i, sample_ellipsoid(rng, c, radii, 500), np.asarray(c, float), radii))
    bounds = Bounds((0.0, 0.0, -depth), (xs[-1], ys[-1], 0.0))
    return Environment((rows, cols), verts, normals, bodies, bounds)


@pytest.fixture(scope="session")
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def env(cfg):
    return small_env(0, cfg)
