"""Learning-based Feynman-Kac solver for backward (non)linear Schrödinger equations."""

from .deepbsde import TrainConfig, bench_runs, evaluate_point, evaluate_slice, solve
from .problems import REGISTRY, ComplexValue, SchrodingerProblem, get_problem
from .stochastics import TimeGrid

__version__ = "0.1.0"

__all__ = [
    "REGISTRY", "ComplexValue", "SchrodingerProblem", "TimeGrid", "TrainConfig",
    "bench_runs", "evaluate_point", "evaluate_slice", "get_problem", "solve", "__version__",
]
