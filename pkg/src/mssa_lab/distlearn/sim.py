"""Compressed local-momentum SGD over ``N`` simulated nodes.

Per round, node ``n`` refreshes its momentum
``y_n <- y_n - beta (y_n - grad f_n(x; batch))`` and the server moves
``x <- x - alpha * mean_n C_n(y_n)`` using the momenta sent at the start
of the round. Randomness is keyed per node and round, so the result does
not depend on the order in which nodes are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import (
    IterateState,
    NoiseModel,
    OperatorSystem,
    StepSchedule,
    Trajectory,
    _record_points,
    run_mssa,
    schedule_value,
)
from ..rng import RandomStreams, StepStreams
from .compress import CompressorSpec
from .svm import DistProblem

__all__ = [
    "DistState",
    "DistConfig",
    "NodeNonFiniteError",
    "server_average",
    "cm_step",
    "dist_system",
    "DistNoise",
    "dist_metrics",
    "run_distributed",
    "run_distributed_mssa",
]


@dataclass(frozen=True)
class DistState:
    k: int
    x: np.ndarray
    ys: tuple[np.ndarray, ...]
    comm: int = 0

    @classmethod
    def zeros(cls, prob: DistProblem, x0=None) -> "DistState":
        x = np.zeros(prob.dim) if x0 is None else np.array(x0, dtype=float)
        return cls(0, x, tuple(np.zeros(prob.dim) for _ in range(prob.n_nodes)), 0)


class NodeNonFiniteError(FloatingPointError):
    def __init__(self, node: int, k: int):
        self.node = node
        self.k = k
        where = "server" if node == 0 else f"node {node}"
        super().__init__(f"non-finite value at {where} in round {k}")


def server_average(ys, comp: CompressorSpec, streams: StepStreams | None) -> tuple[np.ndarray, int]:
    """Mean of the compressed momenta and the number of coordinates sent."""
    sent, total = [], 0
    for n, y in enumerate(ys, start=1):
        rng = None if comp.p == 1.0 else streams.get("compress", n)
        c, cnt = comp.apply(y, rng)
        sent.append(c)
        total += cnt
    return np.mean(np.stack(sent), axis=0), total


def cm_step(
    state: DistState,
    prob: DistProblem,
    alpha: float,
    betas,
    comp: CompressorSpec,
    streams: StepStreams | None,
    batch_size: int | None = 10,
) -> DistState:
    """One round. ``batch_size=None`` uses exact local gradients."""
    x = state.x
    new_ys = []
    for n, y in enumerate(state.ys, start=1):
        batch = None if batch_size is None else prob.sample(n, streams.get("batch", n), batch_size)
        g = y - prob.local_grad(n, x, batch)
        if not np.isfinite(g).all():
            raise NodeNonFiniteError(n, state.k)
        new_ys.append(y - betas[n - 1] * g)
    avg, sent = server_average(state.ys, comp, streams)
    if not np.isfinite(avg).all():
        raise NodeNonFiniteError(0, state.k)
    return DistState(state.k + 1, x - alpha * avg, tuple(new_ys), state.comm + sent)


def dist_system(prob: DistProblem, comp: CompressorSpec, batch_size: int | None = 10) -> tuple[OperatorSystem, "DistNoise"]:
    """``h_n = y_n - grad f_n(x)`` and ``v = mean_n y_n`` with the matching
    mini-batch and compression noise."""
    N = prob.n_nodes

    def make_h(n):
        def h(x, ys):
            return ys[-1] - prob.local_grad(n, x)

        return h

    def v(x, ys):
        return np.mean(np.stack(ys), axis=0)

    def make_star(n):
        def y_star(x, prefix):
            return prob.local_grad(n, x)

        return y_star

    system = OperatorSystem(
        (prob.dim,) * (N + 1), v, [make_h(n) for n in range(1, N + 1)],
        y_star=[make_star(n) for n in range(1, N + 1)],
        x_star=prob.x_star, constants={"mu": [1.0] * N, "ell": [1.0] * N},
        name=f"{type(prob).__name__}-p{comp.p:g}",
    )
    return system, DistNoise(prob, comp, batch_size)


class DistNoise(NoiseModel):
    """Mini-batch noise on ``h_n``; compression noise on ``v``."""

    def __init__(self, prob: DistProblem, comp: CompressorSpec, batch_size: int | None = 10):
        self.prob = prob
        self.comp = comp
        self.batch_size = batch_size
        self.declared = {0: {"omega": comp.omega}}

    def evaluate(self, n, state, system, streams):
        if n == 0:
            return server_average(state.ys, self.comp, streams)[0]
        batch = None if self.batch_size is None else self.prob.sample(n, streams.get("batch", n), self.batch_size)
        return state.ys[n - 1] - self.prob.local_grad(n, state.x, batch)


def dist_metrics(prob: DistProblem, x, ys) -> dict[str, float]:
    """Gradient norm squared of the average loss and the mean squared gap
    between each momentum and its exact local gradient."""
    grads = [prob.local_grad(n, x) for n in range(1, prob.n_nodes + 1)]
    G = np.mean(np.stack(grads), axis=0)
    bias = float(np.mean([np.sum((y - g) ** 2) for y, g in zip(ys, grads)]))
    return {"grad_norm_sq": float(G @ G), "momentum_bias": bias}


@dataclass(frozen=True)
class DistConfig:
    alpha: StepSchedule
    beta: StepSchedule
    K: int = 10000
    seed: int = 0
    batch_size: int | None = 10
    record_stride: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def inverse_k(cls, alpha_scale: float, beta_scale: float, offset: float = 0.0, **kw) -> "DistConfig":
        """``alpha = a / (k + 1 + offset)``, ``beta = b / (k + 1 + offset)``."""
        return cls(
            StepSchedule("poly", alpha_scale, 1.0, offset=offset),
            StepSchedule("poly", beta_scale, 1.0, offset=offset),
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.to_dict(),
            "beta": self.beta.to_dict(),
            "K": self.K,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "record_stride": self.record_stride,
        }


def run_distributed(prob: DistProblem, comp: CompressorSpec, config: DistConfig, *, x0=None, record_at=None) -> Trajectory:
    """Columns ``k, grad_norm_sq, momentum_bias, comm_coords``; the last is
    the cumulative number of coordinates sent by all nodes."""
    state = DistState.zeros(prob, x0)
    points = _record_points(config.K, config.record_stride, record_at)
    rng = RandomStreams(config.seed)
    traj = Trajectory(columns={}, meta={"config": config.to_dict(), "compressor": comp.to_dict()})
    N = prob.n_nodes
    for _ in range(config.K):
        k = state.k
        alpha = schedule_value(config.alpha, k)
        beta = schedule_value(config.beta, k)
        try:
            state = cm_step(state, prob, alpha, [beta] * N, comp, rng.at(k), config.batch_size)
        except NodeNonFiniteError as err:
            traj.failure = str(err)
            break
        if state.k in points:
            row = dist_metrics(prob, state.x, state.ys)
            row["comm_coords"] = state.comm
            traj.append(state.k, row)
    traj.final_state = state
    return traj


def run_distributed_mssa(prob: DistProblem, comp: CompressorSpec, config: DistConfig, *, x0=None, record_at=None) -> Trajectory:
    """Same run through the generic multi-sequence engine (no
    communication accounting)."""
    system, noise = dist_system(prob, comp, config.batch_size)
    N = prob.n_nodes
    init = IterateState(0, np.zeros(prob.dim) if x0 is None else np.array(x0, dtype=float),
                        tuple(np.zeros(prob.dim) for _ in range(N)))
    extra = {
        "grad_norm_sq": lambda s: dist_metrics(prob, s.x, s.ys)["grad_norm_sq"],
        "momentum_bias": lambda s: dist_metrics(prob, s.x, s.ys)["momentum_bias"],
    }
    return run_mssa(
        system, init, (config.alpha, [config.beta] * N), noise, config.K, config.seed,
        config.record_stride, record_at=record_at, metrics=[], extra_metrics=extra,
    )
