"""Log-log slope fits and the multi-horizon rate experiments."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import GaussianNoise, NoiseModel, OperatorSystem, StepSchedule, run_mssa
from .instances import bundled_primitive, bundled_strongly_monotone, make_linear_instance

__all__ = [
    "RateFit",
    "estimate_rate_slope",
    "horizon_grid",
    "RateExperiment",
    "rate_errors",
    "rate_experiment",
    "rate_setup",
    "strongly_monotone_rate",
    "primitive_rate",
]


@dataclass
class RateFit:
    points: list[tuple[int, float]]
    slope: float
    intercept: float
    residual: float
    discard_frac: float
    used: list[tuple[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "points": [[int(k), float(e)] for k, e in self.points],
            "used": [[int(k), float(e)] for k, e in self.used],
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "discard_frac": self.discard_frac,
        }


def estimate_rate_slope(points: Sequence[tuple[float, float]], discard_frac: float = 0.2) -> RateFit:
    """Least-squares fit of ``ln error = slope * ln K + intercept``.

    The first ``floor(discard_frac * len(points))`` horizons are dropped as
    burn-in. Non-positive errors are dropped with a warning; a fit resting
    on fewer than four points also warns.
    """
    pts = sorted((int(k), float(e)) for k, e in points)
    ks = [k for k, _ in pts]
    if len(set(ks)) != len(ks):
        raise ValueError("horizons must be distinct")
    n_drop = int(math.floor(discard_frac * len(pts)))
    kept = pts[n_drop:]
    used = []
    for k, e in kept:
        if e > 0:
            used.append((k, e))
        else:
            warnings.warn(f"dropping non-positive error {e} at K={k}", RuntimeWarning, stacklevel=2)
    if len(used) < 2:
        raise ValueError("need at least two positive points after discarding burn-in")
    if len(used) < 4:
        warnings.warn(f"slope fitted from only {len(used)} points", RuntimeWarning, stacklevel=2)
    lk = np.log([k for k, _ in used])
    le = np.log([e for _, e in used])
    X = np.column_stack([lk, np.ones_like(lk)])
    coef, *_ = np.linalg.lstsq(X, le, rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - le) ** 2)))
    return RateFit(pts, float(coef[0]), float(coef[1]), resid, discard_frac, used)


def horizon_grid(lo_exp: int = 7, hi_exp: int = 13, base: int = 2) -> list[int]:
    return [base**j for j in range(lo_exp, hi_exp + 1)]


@dataclass
class RateExperiment:
    horizons: list[int]
    errors: np.ndarray          # (n_seeds, n_horizons)
    metric: str
    fit: RateFit

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=0)


def rate_errors(
    system: OperatorSystem,
    noise: NoiseModel | None,
    schedule_for: Callable[[int], StepSchedule],
    metric: str,
    horizons: Sequence[int],
    seed: int,
    *,
    running_average: bool = False,
) -> list[float]:
    """Final (or running-average) ``metric`` for one seed at each horizon;
    every horizon is a separate run with its own schedule."""
    N = system.n_secondary
    col = f"avg_{metric}" if running_average else metric
    out = []
    for K in horizons:
        sched = schedule_for(K)
        traj = run_mssa(
            system, None, (sched, [sched] * N), noise, K, seed,
            record_stride=K, metrics=[metric], running_average=running_average,
        )
        if traj.failure:
            raise FloatingPointError(traj.failure)
        out.append(traj.last(col))
    return out


def rate_experiment(
    system: OperatorSystem,
    noise: NoiseModel | None,
    schedule_for: Callable[[int], StepSchedule],
    metric: str,
    horizons: Sequence[int],
    seeds: Sequence[int],
    *,
    running_average: bool = False,
    discard_frac: float = 0.2,
) -> RateExperiment:
    """Run every (seed, horizon) pair and fit the slope of the seed-mean.

    ``metric`` is read at the final iterate, or as its running average over
    iterates ``1..K`` when ``running_average`` is set.
    """
    horizons = sorted(int(k) for k in horizons)
    errors = np.array([
        rate_errors(system, noise, schedule_for, metric, horizons, seed, running_average=running_average)
        for seed in seeds
    ])
    col = f"avg_{metric}" if running_average else metric
    fit = estimate_rate_slope(list(zip(horizons, errors.mean(axis=0))), discard_frac)
    return RateExperiment(horizons, errors, col, fit)


RATE_SETUPS = ("strongly-monotone", "primitive")


def rate_setup(name: str, sigma: float = 0.1, scale: float | None = None) -> dict:
    """System, noise, schedule family and metric of a bundled rate study."""
    if name == "strongly-monotone":
        system = make_linear_instance(bundled_strongly_monotone(), "bundled-strongly-monotone")
        if scale is None:
            scale = 1.0 / min([system.constants["mu0"], *system.constants["mu"]])
        return {
            "system": system,
            "noise": GaussianNoise(sigma),
            "schedule_for": lambda K: StepSchedule("log_over_K", scale, horizon=K),
            "metric": "total_err_sq",
            "running_average": False,
        }
    if name == "primitive":
        system = make_linear_instance(bundled_primitive(), "bundled-primitive")
        scale = 1.0 if scale is None else scale
        return {
            "system": system,
            "noise": GaussianNoise(sigma),
            "schedule_for": lambda K: StepSchedule.inv_sqrt_horizon(scale, K),
            "metric": "v_diamond_sq",
            "running_average": True,
        }
    raise ValueError(f"unknown rate setup {name!r}; expected one of {RATE_SETUPS}")


def _bundled_rate(name, horizons, seeds, sigma, scale) -> RateExperiment:
    st = rate_setup(name, sigma, scale)
    return rate_experiment(
        st["system"], st["noise"], st["schedule_for"], st["metric"],
        horizon_grid() if horizons is None else horizons, list(seeds),
        running_average=st["running_average"],
    )


def strongly_monotone_rate(
    horizons: Sequence[int] | None = None,
    seeds: Sequence[int] = range(20),
    sigma: float = 0.1,
    scale: float | None = None,
) -> RateExperiment:
    """``log K / K`` steps on the bundled strongly monotone instance; error
    ``||x^K - x*||^2 + sum_n ||y_n^K - y_n*(x^K, y_<n^K)||^2``."""
    return _bundled_rate("strongly-monotone", horizons, seeds, sigma, scale)


def primitive_rate(
    horizons: Sequence[int] | None = None,
    seeds: Sequence[int] = range(20),
    sigma: float = 0.1,
    scale: float = 1.0,
) -> RateExperiment:
    """``1 / sqrt(K)`` steps on the singular-quadratic instance; metric is
    the running mean of ``||v(x^k, y(x^k))||^2``."""
    return _bundled_rate("primitive", horizons, seeds, sigma, scale)
