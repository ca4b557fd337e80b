"""Single-timescale multi-sequence stochastic approximation.

A system couples one main sequence ``x`` with ``N`` secondary sequences
``y_1..y_N``::

    y_n <- y_n - beta_n * (h_n(x, y_1..y_n) + psi_n)     n = 1..N
    x   <- x   - alpha  * (v(x, y_1..y_N)   + xi)

Every operator in a step is evaluated at the incoming iterate. ``N = 0``
is plain single-sequence stochastic approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .rng import RandomStreams, StepStreams

__all__ = [
    "StepSchedule",
    "schedule_value",
    "default_scale",
    "OperatorSystem",
    "IterateState",
    "NoiseModel",
    "GaussianNoise",
    "Trajectory",
    "NonFiniteError",
    "initial_state",
    "mssa_step",
    "run_mssa",
    "residuals",
]

SCHEDULE_KINDS = ("constant", "poly", "log_over_K")


@dataclass(frozen=True)
class StepSchedule:
    """Step-size family.

    ``constant``: ``c``; ``poly``: ``c / (k + 1 + offset) ** exponent``;
    ``log_over_K``: ``c * max(1, ln K) / K`` for a fixed horizon ``K``.
    ``inv_sqrt_K`` is not a separate kind: use ``constant`` with
    ``c / sqrt(K)`` via :meth:`inv_sqrt_horizon`.
    """

    kind: str = "constant"
    scale: float = 1.0
    exponent: float = 0.5
    horizon: int = 1
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"schedule scale must be positive, got {self.scale}")
        if self.kind == "poly" and not (0 < self.exponent <= 1):
            raise ValueError(f"poly exponent must lie in (0, 1], got {self.exponent}")
        if not (self.offset >= 0 and math.isfinite(self.offset)):
            raise ValueError(f"offset must be a finite non-negative number, got {self.offset}")
        if self.kind == "log_over_K" and int(self.horizon) < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")

    @classmethod
    def inv_sqrt_horizon(cls, scale: float, horizon: int) -> "StepSchedule":
        """Constant step ``scale / sqrt(horizon)``."""
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        return cls("constant", scale / math.sqrt(horizon))

    def with_horizon(self, horizon: int) -> "StepSchedule":
        return StepSchedule(self.kind, self.scale, self.exponent, int(horizon), self.offset)

    def __call__(self, k: int) -> float:
        return schedule_value(self, k)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scale": self.scale,
            "exponent": self.exponent,
            "horizon": self.horizon,
            "offset": self.offset,
        }


def schedule_value(spec: StepSchedule, k: int) -> float:
    if k < 0:
        raise ValueError(f"iteration index must be >= 0, got {k}")
    if spec.kind == "constant":
        return spec.scale
    if spec.kind == "poly":
        return spec.scale / (k + 1 + spec.offset) ** spec.exponent
    K = spec.horizon
    return spec.scale * max(1.0, math.log(K)) / K


def default_scale(mu: float | None) -> float:
    """``1 / mu`` when a strong-monotonicity constant is known, else 1."""
    if mu is None or not mu > 0:
        return 1.0
    return 1.0 / mu


Operator = Callable[[np.ndarray, Sequence[np.ndarray]], np.ndarray]


@dataclass
class OperatorSystem:
    """Main operator ``v`` and secondary operators ``h_1..h_N``.

    ``secondary_ops[n-1]`` is called as ``h_n(x, (y_1, ..., y_n))``: later
    secondary iterates are never passed. ``y_star[n-1](x, (y_1..y_{n-1}))``
    and ``x_star`` are optional closed-form roots used for metrics.
    """

    dims: tuple[int, ...]
    main_op: Operator
    secondary_ops: Sequence[Operator] = ()
    y_star: Sequence[Operator] | None = None
    x_star: np.ndarray | None = None
    constants: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.secondary_ops = tuple(self.secondary_ops)
        if len(self.dims) != len(self.secondary_ops) + 1:
            raise ValueError(
                f"dims has {len(self.dims)} entries but there are {len(self.secondary_ops)} secondary operators"
            )
        if self.y_star is not None:
            self.y_star = tuple(self.y_star)
            if len(self.y_star) != self.n_secondary:
                raise ValueError("y_star must provide one map per secondary operator")

    @property
    def n_secondary(self) -> int:
        return len(self.secondary_ops)

    @property
    def has_oracle(self) -> bool:
        return self.y_star is not None

    def main(self, x, ys) -> np.ndarray:
        return np.asarray(self.main_op(x, tuple(ys)), dtype=float)

    def secondary(self, n: int, x, ys) -> np.ndarray:
        """``h_n`` for ``n`` in ``1..N``; only ``ys[:n]`` is forwarded."""
        return np.asarray(self.secondary_ops[n - 1](x, tuple(ys[:n])), dtype=float)

    def operator(self, n: int, x, ys) -> np.ndarray:
        """Index 0 is the main operator, ``n >= 1`` the secondary ones."""
        return self.main(x, ys) if n == 0 else self.secondary(n, x, ys)

    def fixed_point(self, n: int, x, ys_prefix) -> np.ndarray:
        if self.y_star is None:
            raise ValueError(f"system {self.name!r} has no closed-form fixed points")
        return np.asarray(self.y_star[n - 1](x, tuple(ys_prefix[: n - 1])), dtype=float)

    def y_diamond(self, x) -> list[np.ndarray]:
        """Fixed points composed along the chain: ``y_n(x) = y_n*(x, y_1(x)..y_{n-1}(x))``."""
        out: list[np.ndarray] = []
        for n in range(1, self.n_secondary + 1):
            out.append(self.fixed_point(n, x, out))
        return out


@dataclass(frozen=True)
class IterateState:
    k: int
    x: np.ndarray
    ys: tuple[np.ndarray, ...] = ()

    def check(self, system: OperatorSystem) -> None:
        if self.x.shape != (system.dims[0],):
            raise ValueError(f"x has shape {self.x.shape}, expected ({system.dims[0]},)")
        if len(self.ys) != system.n_secondary:
            raise ValueError(f"expected {system.n_secondary} secondary iterates, got {len(self.ys)}")
        for n, (y, d) in enumerate(zip(self.ys, system.dims[1:]), start=1):
            if y.shape != (d,):
                raise ValueError(f"y_{n} has shape {y.shape}, expected ({d},)")
        for arr in (self.x, *self.ys):
            if not np.all(np.isfinite(arr)):
                raise ValueError("iterate contains non-finite entries")


def initial_state(system: OperatorSystem, x0=None, ys0=None) -> IterateState:
    """Zero initialisation unless values are given."""
    x = np.zeros(system.dims[0]) if x0 is None else np.array(x0, dtype=float)
    if ys0 is None:
        ys = tuple(np.zeros(d) for d in system.dims[1:])
    else:
        ys = tuple(np.array(y, dtype=float) for y in ys0)
    state = IterateState(0, x, ys)
    state.check(system)
    return state


class NoiseModel:
    """Produces noisy operator evaluations ``op + noise``.

    Subclasses either override :meth:`noise` (additive perturbation of the
    exact value) or :meth:`evaluate` (when the noisy value is computed
    directly from samples, as in SOBA or mini-batch gradients).
    ``declared`` holds known Assumption-4 constants keyed by operator index.
    """

    declared: Mapping[int, Mapping[str, float]] = {}

    def noise(self, n: int, state: IterateState, value: np.ndarray, streams: StepStreams) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, n: int, state: IterateState, system: OperatorSystem, streams: StepStreams) -> np.ndarray:
        value = system.operator(n, state.x, state.ys)
        return value + self.noise(n, state, value, streams)

    def sample(self, n: int, state: IterateState, system: OperatorSystem, streams: StepStreams) -> np.ndarray:
        """One realisation of the noise on operator ``n`` at ``state``."""
        return self.evaluate(n, state, system, streams) - system.operator(n, state.x, state.ys)


class GaussianNoise(NoiseModel):
    """Additive Gaussian noise.

    Per-coordinate variance is ``sigma**2 + omega * ||op||**2 / d`` plus an
    optional constant ``bias`` (which breaks the martingale property and
    exists for checker tests). In the norm-based convention this gives
    ``Var = d * sigma**2 + omega * ||op||**2``.
    """

    def __init__(self, sigma: float, omega: float = 0.0, bias: float = 0.0, indices: Iterable[int] | None = None):
        if sigma < 0 or omega < 0:
            raise ValueError("sigma and omega must be non-negative")
        self.sigma = float(sigma)
        self.omega = float(omega)
        self.bias = float(bias)
        self.indices = None if indices is None else frozenset(indices)

    def applies(self, n: int) -> bool:
        return self.indices is None or n in self.indices

    def noise(self, n, state, value, streams):
        if not self.applies(n):
            return np.zeros_like(value)
        d = value.shape[0]
        var = self.sigma**2
        if self.omega:
            var = var + self.omega * float(value @ value) / d
        z = streams.get("noise", n).standard_normal(d)
        return math.sqrt(var) * z + self.bias

    def declared_for(self, system: OperatorSystem) -> dict[int, dict[str, float]]:
        out = {}
        for n, d in enumerate(system.dims):
            if self.applies(n):
                out[n] = {"sigma_sq": d * self.sigma**2, "omega": self.omega}
            else:
                out[n] = {"sigma_sq": 0.0, "omega": 0.0}
        return out


class NonFiniteError(FloatingPointError):
    def __init__(self, operator: str, k: int, state: IterateState):
        self.operator = operator
        self.k = k
        self.state = state
        super().__init__(
            f"non-finite output from {operator} at iteration {k} "
            f"(|x|={np.linalg.norm(state.x):.3g}, "
            f"|y|={[float(np.linalg.norm(y)) for y in state.ys]})"
        )


def _op_name(n: int) -> str:
    return "v" if n == 0 else f"h_{n}"


def mssa_step(
    state: IterateState,
    system: OperatorSystem,
    alpha: float,
    betas: Sequence[float],
    noise: NoiseModel | None = None,
    rng: RandomStreams | None = None,
) -> IterateState:
    """One Jacobi-style update of all sequences."""
    N = system.n_secondary
    if len(betas) != N:
        raise ValueError(f"expected {N} secondary step sizes, got {len(betas)}")
    if noise is not None and rng is None:
        raise ValueError("a noise model needs random streams")
    streams = rng.at(state.k) if rng is not None else None
    x, ys = state.x, state.ys

    new_ys = []
    for n in range(1, N + 1):
        if noise is None:
            g = system.secondary(n, x, ys)
        else:
            g = noise.evaluate(n, state, system, streams)
        if not np.isfinite(g).all():
            raise NonFiniteError(_op_name(n), state.k, state)
        new_ys.append(ys[n - 1] - betas[n - 1] * g)

    g = system.main(x, ys) if noise is None else noise.evaluate(0, state, system, streams)
    if not np.isfinite(g).all():
        raise NonFiniteError("v", state.k, state)
    new_x = x - alpha * g
    return IterateState(state.k + 1, new_x, tuple(new_ys))


def residuals(state: IterateState, system: OperatorSystem) -> tuple[float, list[float]]:
    """``(||v||^2, [||h_1||^2, ..., ||h_N||^2])`` at ``state``."""
    v = system.main(state.x, state.ys)
    hs = [system.secondary(n, state.x, state.ys) for n in range(1, system.n_secondary + 1)]
    for n, val in enumerate([v, *hs]):
        if not np.isfinite(val).all():
            raise NonFiniteError(_op_name(n), state.k, state)
    return float(v @ v), [float(h @ h) for h in hs]


def default_metric_names(system: OperatorSystem) -> list[str]:
    names = ["v_sq"] + [f"h{n}_sq" for n in range(1, system.n_secondary + 1)]
    if system.has_oracle:
        names += [f"y{n}_err_sq" for n in range(1, system.n_secondary + 1)]
        names.append("v_diamond_sq")
        if system.x_star is not None:
            names += ["x_err_sq", "total_err_sq"]
    return names


def state_metrics(
    state: IterateState,
    system: OperatorSystem,
    names: Sequence[str],
    extra: Mapping[str, Callable[[IterateState], float]] | None = None,
) -> dict[str, float]:
    """Evaluate the requested metrics at ``state``."""
    extra = extra or {}
    out: dict[str, float] = {}
    N = system.n_secondary
    cache: dict[str, object] = {}

    def res():
        if "res" not in cache:
            cache["res"] = residuals(state, system)
        return cache["res"]

    def y_errs():
        if "yerr" not in cache:
            errs = []
            for n in range(1, N + 1):
                d = state.ys[n - 1] - system.fixed_point(n, state.x, state.ys)
                errs.append(float(d @ d))
            cache["yerr"] = errs
        return cache["yerr"]

    for name in names:
        if name in extra:
            out[name] = float(extra[name](state))
        elif name == "v_sq":
            out[name] = res()[0]
        elif name.startswith("h") and name.endswith("_sq"):
            out[name] = res()[1][int(name[1:-3]) - 1]
        elif name.startswith("y") and name.endswith("_err_sq"):
            out[name] = y_errs()[int(name[1:-7]) - 1]
        elif name == "x_err_sq":
            d = state.x - system.x_star
            out[name] = float(d @ d)
        elif name == "total_err_sq":
            d = state.x - system.x_star
            out[name] = float(d @ d) + sum(y_errs())
        elif name == "v_diamond_sq":
            v = system.main(state.x, system.y_diamond(state.x))
            out[name] = float(v @ v)
        else:
            raise KeyError(f"unknown metric {name!r}")
    return out


@dataclass
class Trajectory:
    """Recorded metrics, one row per recorded iteration."""

    columns: dict[str, list[float]]
    meta: dict = field(default_factory=dict)
    failure: str | None = None
    final_state: IterateState | None = None

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name], dtype=float)

    def __len__(self) -> int:
        return len(self.columns.get("k", ()))

    def last(self, name: str) -> float:
        return self.columns[name][-1]

    def rows(self) -> list[list[float]]:
        return [list(r) for r in zip(*self.columns.values())]

    def append(self, k: int, values: Mapping[str, float]) -> None:
        if not self.columns:
            self.columns["k"] = []
            for name in values:
                self.columns[name] = []
        self.columns["k"].append(k)
        for name, val in values.items():
            self.columns[name].append(val)


def _record_points(K: int, record_stride: int | None, record_at: Iterable[int] | None) -> set[int]:
    if record_at is not None:
        pts = {int(k) for k in record_at if 1 <= int(k) <= K}
    else:
        stride = max(1, K // 1000) if record_stride is None else int(record_stride)
        if stride < 1:
            raise ValueError("record_stride must be >= 1")
        pts = set(range(stride, K + 1, stride))
    pts.add(K)
    return pts


def run_mssa(
    system: OperatorSystem,
    init: IterateState | None,
    schedules: tuple[StepSchedule, Sequence[StepSchedule]],
    noise: NoiseModel | None = None,
    K: int = 1000,
    seed: int = 0,
    record_stride: int | None = None,
    *,
    record_at: Iterable[int] | None = None,
    metrics: Sequence[str] | None = None,
    extra_metrics: Mapping[str, Callable[[IterateState], float]] | None = None,
    running_average: bool = False,
) -> Trajectory:
    """Iterate ``K`` steps and record metrics.

    With ``running_average`` every metric is evaluated at each iterate
    ``1..k`` and the recorded row also carries ``avg_<name>``, the mean over
    those iterates. A non-finite operator output stops the run; the partial
    trajectory is returned with ``failure`` set.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    main_sched, sec_scheds = schedules
    sec_scheds = list(sec_scheds)
    if len(sec_scheds) != system.n_secondary:
        raise ValueError(f"expected {system.n_secondary} secondary schedules, got {len(sec_scheds)}")
    state = initial_state(system) if init is None else init
    state.check(system)
    extra = dict(extra_metrics or {})
    names = list(default_metric_names(system) if metrics is None else metrics)
    for name in extra:
        if name not in names:
            names.append(name)
    points = _record_points(K, record_stride, record_at)
    rng = RandomStreams(seed)

    traj = Trajectory(
        columns={},
        meta={
            "seed": seed,
            "K": K,
            "main_schedule": main_sched.to_dict(),
            "secondary_schedules": [s.to_dict() for s in sec_scheds],
            "record_stride": record_stride,
            "system": system.name,
        },
    )
    sums = dict.fromkeys(names, 0.0)
    for _ in range(K):
        k = state.k
        alpha = schedule_value(main_sched, k)
        betas = [schedule_value(s, k) for s in sec_scheds]
        try:
            state = mssa_step(state, system, alpha, betas, noise, rng)
            if running_average or state.k in points:
                vals = state_metrics(state, system, names, extra)
        except NonFiniteError as err:
            traj.failure = str(err)
            break
        if running_average:
            for name in names:
                sums[name] += vals[name]
        if state.k in points:
            row = dict(vals)
            if running_average:
                for name in names:
                    row[f"avg_{name}"] = sums[name] / state.k
            traj.append(state.k, row)
    traj.final_state = state
    return traj
