"""Adaptive fictitious-domain finite elements for elliptic interface problems."""
from .adapt import AdaptConfig, StudyRecord, adaptive_loop, doerfler_mark, fixed_fraction_mark
from .assembly import Discretization, ProblemSpec, assemble
from .estimator import CoefficientMode, indicators
from .harness import PRESETS, RunConfig, error_norms, eoc, get_preset, load_config
from .solver import SolverConfig, solve, solve_state

__all__ = [
    "AdaptConfig", "CoefficientMode", "Discretization", "PRESETS", "ProblemSpec", "RunConfig",
    "SolverConfig", "StudyRecord", "adaptive_loop", "assemble", "doerfler_mark", "eoc",
    "error_norms", "fixed_fraction_mark", "get_preset", "indicators", "load_config", "solve",
    "solve_state",
]
