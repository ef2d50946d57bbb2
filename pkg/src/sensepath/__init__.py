"""Informative sensing-path planning over a Bayesian Hilbert occupancy map."""

from .config import ExperimentConfig
from .environment import Environment, generate_synthetic, load_environment, save_environment
from .graph import WorkspaceGraph, build_graph
from .loop import TrialContext, run_trial

__version__ = "0.1.0"

__all__ = [
    "Environment",
    "ExperimentConfig",
    "TrialContext",
    "WorkspaceGraph",
    "build_graph",
    "generate_synthetic",
    "load_environment",
    "run_trial",
    "save_environment",
]
