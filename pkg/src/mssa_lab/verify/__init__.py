"""Synthetic instances, assumption checkers and convergence-rate fits."""

from .checks import (
    AssumptionReport,
    FixedPointError,
    LipschitzReport,
    MonotonicityCheck,
    NoiseCheck,
    check_assumptions,
    check_noise_variance,
    check_strong_monotonicity,
    fixed_point_oracle,
    lipschitz_constants,
)
from .instances import (
    LinearInstanceSpec,
    bundled_primitive,
    bundled_strongly_monotone,
    composed_affine_maps,
    make_linear_instance,
    random_linear_spec,
    random_spd,
)
from .rates import (
    RateExperiment,
    RateFit,
    estimate_rate_slope,
    horizon_grid,
    primitive_rate,
    rate_errors,
    rate_experiment,
    rate_setup,
    strongly_monotone_rate,
)

__all__ = [
    "AssumptionReport",
    "FixedPointError",
    "LinearInstanceSpec",
    "LipschitzReport",
    "MonotonicityCheck",
    "NoiseCheck",
    "RateExperiment",
    "RateFit",
    "bundled_primitive",
    "bundled_strongly_monotone",
    "check_assumptions",
    "check_noise_variance",
    "check_strong_monotonicity",
    "composed_affine_maps",
    "estimate_rate_slope",
    "fixed_point_oracle",
    "horizon_grid",
    "lipschitz_constants",
    "make_linear_instance",
    "primitive_rate",
    "random_linear_spec",
    "random_spd",
    "rate_errors",
    "rate_experiment",
    "rate_setup",
    "strongly_monotone_rate",
]
