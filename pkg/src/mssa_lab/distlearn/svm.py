"""Distributed problems and the squared-hinge SVM instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SVMData",
    "gen_svm_data",
    "svm_loss_grad",
    "DistProblem",
    "SVMProblem",
    "estimate_dissimilarity",
]


@dataclass
class SVMData:
    features: np.ndarray      # (N, M, d)
    labels: np.ndarray        # (N, M), entries in {-1, +1}
    w_star: np.ndarray
    b_star: float
    scales: np.ndarray        # per-feature standard deviations

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def gen_svm_data(d: int, N: int, M_n: int, seed: int, noise: float = 0.2) -> SVMData:
    """Gaussian features with per-coordinate scales ``v ~ U[0, 1]^d``,
    planted ``(w*, b*) ~ U[-1/2, 1/2]^(d+1)`` and labels
    ``sign(s'w* + b* + noise * r)``, ``r ~ N(0, 1)``; ``sign(0) = +1``."""
    if min(d, N, M_n) < 1:
        raise ValueError("d, N and M_n must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.0, 1.0, d)
    wb = rng.uniform(-0.5, 0.5, d + 1)
    S = rng.standard_normal((N, M_n, d)) * v
    r = rng.standard_normal((N, M_n))
    score = S @ wb[:d] + wb[d] + noise * r
    t = np.where(score >= 0, 1.0, -1.0)
    return SVMData(S, t, wb[:d], float(wb[d]), v)


def svm_loss_grad(w, b, S, t, lam: float) -> tuple[float, np.ndarray]:
    """Batch mean of ``max(1 - t (s'w + b), 0)^2`` plus ``lam/2 ||w||^2``.

    The gradient is returned as one vector over ``(w, b)``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    S = np.atleast_2d(S)
    t = np.atleast_1d(t)
    slack = np.maximum(1.0 - t * (S @ w + b), 0.0)
    n = S.shape[0]
    value = float(slack @ slack) / n + 0.5 * lam * float(w @ w)
    coef = -2.0 * slack * t / n
    grad = np.empty(w.shape[0] + 1)
    grad[:-1] = coef @ S + lam * w
    grad[-1] = coef.sum()
    return value, grad


class DistProblem:
    """``min_x 1/N sum_n f_n(x)`` with per-node samplers.

    ``sample(n, rng, batch_size)`` returns a batch token that
    ``local_grad(n, x, batch)`` understands; ``batch=None`` is the exact
    local gradient. Nodes are numbered ``1..N``.
    """

    n_nodes: int
    dim: int
    dissimilarity: tuple[float, float] | None = None
    x_star: np.ndarray | None = None

    def sample(self, n: int, rng: np.random.Generator, batch_size: int):
        raise NotImplementedError

    def local_grad(self, n: int, x, batch=None) -> np.ndarray:
        raise NotImplementedError

    def local_loss(self, n: int, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        return np.mean([self.local_grad(n, x) for n in range(1, self.n_nodes + 1)], axis=0)

    def loss(self, x) -> float:
        return float(np.mean([self.local_loss(n, x) for n in range(1, self.n_nodes + 1)]))

    def self_test(self, x, n_samples: int = 2000, batch_size: int = 1, seed: int = 0) -> float:
        """Largest z-score between the sampler mean and the exact gradient."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for n in range(1, self.n_nodes + 1):
            draws = np.array([self.local_grad(n, x, self.sample(n, rng, batch_size)) for _ in range(n_samples)])
            se = draws.std(axis=0, ddof=1) / np.sqrt(n_samples)
            dev = np.abs(draws.mean(axis=0) - self.local_grad(n, x))
            mask = se > 0
            if np.any(dev[~mask] > 1e-12):
                return float("inf")
            if mask.any():
                worst = max(worst, float((dev[mask] / se[mask]).max()))
        return worst


class SVMProblem(DistProblem):
    """One squared-hinge SVM per node on its own data shard; ``x = (w, b)``."""

    def __init__(self, data: SVMData, lam: float = 0.5):
        shards = [(data.features[n], data.labels[n]) for n in range(data.n_nodes)]
        self._setup(shards, lam)
        self.data = data

    @classmethod
    def from_shards(cls, shards, lam: float = 0.5) -> "SVMProblem":
        """Build from a list of ``(features, labels)`` pairs of any sizes."""
        obj = cls.__new__(cls)
        obj._setup(shards, lam)
        obj.data = None
        return obj

    def _setup(self, shards, lam):
        if lam < 0:
            raise ValueError("lam must be non-negative")
        if not shards:
            raise ValueError("need at least one node")
        self.shards = []
        for S, t in shards:
            S = np.atleast_2d(np.asarray(S, dtype=float))
            t = np.asarray(t, dtype=float)
            if S.shape[0] == 0 or S.shape[0] != t.shape[0]:
                raise ValueError("every shard needs matching, non-empty features and labels")
            if not np.all(np.abs(t) == 1):
                raise ValueError("labels must be -1 or +1")
            self.shards.append((S, t))
        dims = {S.shape[1] for S, _ in self.shards}
        if len(dims) != 1:
            raise ValueError("all shards must share the feature dimension")
        self.lam = float(lam)
        self.n_nodes = len(self.shards)
        self.dim = dims.pop() + 1

    def sample(self, n, rng, batch_size):
        return rng.integers(0, self.shards[n - 1][0].shape[0], batch_size)

    def _shard(self, n, batch):
        S, t = self.shards[n - 1]
        if batch is not None:
            S, t = S[batch], t[batch]
        return S, t

    def local_grad(self, n, x, batch=None):
        S, t = self._shard(n, batch)
        return svm_loss_grad(x[:-1], x[-1], S, t, self.lam)[1]

    def local_loss(self, n, x):
        S, t = self._shard(n, None)
        return svm_loss_grad(x[:-1], x[-1], S, t, self.lam)[0]

    def solve(self, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
        """Global minimiser by a damped semismooth Newton iteration (the loss
        is strongly convex with a piecewise-constant Hessian)."""
        S = np.vstack([S for S, _ in self.shards])
        t = np.concatenate([t for _, t in self.shards])
        # each node's mean carries weight 1/N
        wts = np.concatenate([np.full(len(tt), 1.0 / (self.n_nodes * len(tt))) for _, tt in self.shards])
        A = np.hstack([S, np.ones((S.shape[0], 1))])
        reg = np.full(self.dim, self.lam)
        reg[-1] = 0.0
        x = np.zeros(self.dim)

        def value_grad(z):
            slack = np.maximum(1.0 - t * (A @ z), 0.0)
            val = float(wts @ slack**2) + 0.5 * self.lam * float(z[:-1] @ z[:-1])
            return val, A.T @ (-2.0 * wts * slack * t) + reg * z

        for _ in range(max_iter):
            val, g = value_grad(x)
            if np.linalg.norm(g) <= tol:
                break
            active = (1.0 - t * (A @ x)) > 0
            Aa = A[active]
            H = 2.0 * Aa.T @ (wts[active, None] * Aa) + np.diag(reg) + 1e-12 * np.eye(self.dim)
            step = np.linalg.solve(H, -g)
            eta = 1.0
            while value_grad(x + eta * step)[0] > val + 1e-4 * eta * (g @ step) and eta > 1e-10:
                eta *= 0.5
            x = x + eta * step
        self.x_star = x
        return x


def estimate_dissimilarity(prob: DistProblem, probes) -> tuple[float, float]:
    """Empirical ``(a, b)`` with ``1/N sum ||grad f_n||^2 <= a ||grad F||^2 + b^2``
    on the probe points, from the least-squares line through the pairs
    shifted up to cover every probe."""
    lhs, rhs = [], []
    for x in probes:
        gs = [prob.local_grad(n, x) for n in range(1, prob.n_nodes + 1)]
        lhs.append(np.mean([g @ g for g in gs]))
        G = np.mean(gs, axis=0)
        rhs.append(G @ G)
    lhs, rhs = np.array(lhs), np.array(rhs)
    a = max(float(np.polyfit(rhs, lhs, 1)[0]), 1.0) if len(rhs) > 1 and np.ptp(rhs) > 0 else 1.0
    b_sq = max(float(np.max(lhs - a * rhs)), 0.0)
    return a, float(np.sqrt(b_sq))
