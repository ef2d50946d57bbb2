"""Experiment configuration, loadable from JSON or TOML."""
from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .planner import PLANNERS

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # planning
    lam: float = 70.0
    replan_threshold_cm: float = 6.0
    xi: float = 0.01
    ei_stats: str = "prob"
    edge_integrand: str = "cone"
    edge_samples: int = 5
    eps: float = 1e-9
    # map
    hinge_shape: tuple[int, int, int] = (17, 17, 12)
    prior_var: float = 1e4
    kernel_gamma: float | None = None
    kernel_cutoff: float = 1e-2
    bias: bool = False
    bhm_tol: float = 1e-4
    bhm_max_iters: int = 100
    # scene
    grid_dims: tuple[int, int] = (60, 60)
    extent_cm: tuple[float, float] = (20.0, 20.0)
    depth_cm: float = 6.0
    num_targets: tuple[int, int] = (2, 4)
    target_radius_range: tuple[float, float] = (1.0, 2.0)
    normal_k: int = 10
    # sensor
    half_angle_deg: float = 15.0
    cone_depth_cm: float | None = None
    free_density: float = 4.0
    exclusion_cm: float = 0.05
    sense_step_cm: float | None = None
    # termination and evaluation
    coverage_target: float = 0.95
    max_iterations: int = 200
    max_arc_cm: float = 500.0
    eval_resolution_cm: float = 0.5
    # benchmark sweep
    planners: tuple[str, ...] = ("full", "SL", "AD", "DE")
    env_seeds: tuple[int, ...] = tuple(range(10))
    trial_seeds: tuple[int, ...] = (0,)
    workers: int = 1

    def __post_init__(self):
        for name in ("hinge_shape", "grid_dims", "extent_cm", "num_targets", "target_radius_range",
                     "planners", "env_seeds", "trial_seeds"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def hinge_count(self) -> int:
        return math.prod(self.hinge_shape)

    @property
    def vertex_count(self) -> int:
        return math.prod(self.grid_dims)

    @property
    def half_angle(self) -> float:
        return math.radians(self.half_angle_deg)

    def validate(self) -> None:
        positive = ["lam", "replan_threshold_cm", "prior_var", "depth_cm", "free_density",
                    "max_arc_cm", "eval_resolution_cm", "bhm_tol", "eps"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.xi < 0:
            raise ConfigError("xi must be non-negative")
        if not 0 < self.half_angle_deg < 90:
            raise ConfigError("half_angle_deg must be in (0, 90)")
        if not 0 < self.coverage_target <= 1:
            raise ConfigError("coverage_target must be in (0, 1]")
        if self.edge_samples < 2 or self.max_iterations < 1 or self.bhm_max_iters < 1:
            raise ConfigError("edge_samples >= 2, max_iterations >= 1, bhm_max_iters >= 1 required")
        if len(self.hinge_shape) != 3 or min(self.hinge_shape) < 2:
            raise ConfigError(f"hinge_shape must be three ints >= 2, got {self.hinge_shape}")
        if len(self.grid_dims) != 2 or min(self.grid_dims) < 2:
            raise ConfigError(f"grid_dims must be two ints >= 2, got {self.grid_dims}")
        bad = [p for p in self.planners if p not in PLANNERS]
        if bad:
            raise ConfigError(f"unknown planners {bad}; allowed {list(PLANNERS)}")
        if self.ei_stats not in ("latent", "prob"):
            raise ConfigError("ei_stats must be 'latent' or 'prob'")
        if self.edge_integrand not in ("cone", "surface"):
            raise ConfigError("edge_integrand must be 'cone' or 'surface'")
        for name in ("cone_depth_cm", "sense_step_cm", "kernel_gamma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive when set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        try:
            data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update(changes)
        return ExperimentConfig(**d)

