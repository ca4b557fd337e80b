"""Multi-sequence stochastic approximation: core engine, checkers, and the
bilevel and distributed-learning instances."""

from .core import (
    GaussianNoise,
    IterateState,
    NoiseModel,
    NonFiniteError,
    OperatorSystem,
    StepSchedule,
    Trajectory,
    initial_state,
    mssa_step,
    residuals,
    run_mssa,
)
from .rng import RandomStreams

__version__ = "0.1.0"

__all__ = [
    "GaussianNoise",
    "IterateState",
    "NoiseModel",
    "NonFiniteError",
    "OperatorSystem",
    "RandomStreams",
    "StepSchedule",
    "Trajectory",
    "__version__",
    "initial_state",
    "mssa_step",
    "residuals",
    "run_mssa",
]
