"""Stochastic bilevel optimisation with single-loop SOBA updates."""

from .estimator import HypercleanSOBA
from .hyperclean import HypercleanProblem, HypercleanSpec, hyperclean_problem, make_hyperclean_data, one_hot
from .models import LinearModel, MLPModel, make_model
from .problems import (
    BilevelProblem,
    QuadraticBilevel,
    QuadraticBilevelSpec,
    identity_quadratic_spec,
    quadratic_bilevel,
    random_quadratic_spec,
)
from .soba import (
    HypergradientError,
    SOBAConfig,
    SobaNoise,
    conjugate_gradient,
    hypergradient_oracle,
    lint_soba_config,
    soba_run,
    soba_system,
)

__all__ = [
    "BilevelProblem",
    "HypercleanProblem",
    "HypercleanSOBA",
    "HypercleanSpec",
    "HypergradientError",
    "LinearModel",
    "MLPModel",
    "QuadraticBilevel",
    "QuadraticBilevelSpec",
    "SOBAConfig",
    "SobaNoise",
    "conjugate_gradient",
    "hyperclean_problem",
    "hypergradient_oracle",
    "identity_quadratic_spec",
    "lint_soba_config",
    "make_hyperclean_data",
    "make_model",
    "one_hot",
    "quadratic_bilevel",
    "random_quadratic_spec",
    "soba_run",
    "soba_system",
]
