"""Empirical checks of the standing assumptions and closed-form constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import nnls

from ..core import IterateState, NoiseModel, OperatorSystem
from ..rng import RandomStreams
from .instances import LinearInstanceSpec, composed_affine_maps

__all__ = [
    "FixedPointError",
    "fixed_point_oracle",
    "MonotonicityCheck",
    "check_strong_monotonicity",
    "NoiseCheck",
    "check_noise_variance",
    "LipschitzReport",
    "lipschitz_constants",
    "AssumptionReport",
    "check_assumptions",
]


class FixedPointError(RuntimeError):
    def __init__(self, n: int, residual: float, iterations: int):
        self.n = n
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"fixed point of h_{n} not reached after {iterations} iterations (residual {residual:.3e})")


def _solve_secondary(system, n, x, prefix, tol, step, max_iter):
    d = system.dims[n]
    y = np.zeros(d)
    h = system.secondary(n, x, [*prefix, y])
    res = float(np.linalg.norm(h))
    eta = step
    it = 0
    while res > tol:
        if it >= max_iter:
            raise FixedPointError(n, res, it)
        y_new = y - eta * h
        h_new = system.secondary(n, x, [*prefix, y_new])
        res_new = float(np.linalg.norm(h_new))
        if res_new > res and eta > 1e-12:
            eta *= 0.5
        else:
            y, h, res = y_new, h_new, res_new
        it += 1
    return y


def fixed_point_oracle(
    system: OperatorSystem,
    x,
    tol: float | None = None,
    *,
    step: float | None = None,
    max_iter: int = 100_000,
) -> list[np.ndarray]:
    """Composed fixed points ``y_1(x), ..., y_N(x)``.

    Uses the system's closed-form maps when present; otherwise solves
    ``h_n(x, y_1..y_{n-1}, .) = 0`` for ``n = 1..N`` in turn by damped
    fixed-point iteration. The damping starts at ``mu / ell**2`` when the
    system declares those constants and is halved whenever the residual
    grows.
    """
    x = np.asarray(x, dtype=float)
    if system.has_oracle:
        tol = 1e-10 if tol is None else tol
        ys = system.y_diamond(x)
    else:
        tol = 1e-8 if tol is None else tol
        mus = system.constants.get("mu")
        ells = system.constants.get("ell")
        ys = []
        for n in range(1, system.n_secondary + 1):
            eta = step
            if eta is None:
                eta = mus[n - 1] / ells[n - 1] ** 2 if mus and ells else 1.0
            ys.append(_solve_secondary(system, n, x, ys, tol, eta, max_iter))
    for n in range(1, system.n_secondary + 1):
        res = float(np.linalg.norm(system.secondary(n, x, ys)))
        if res > tol:
            raise FixedPointError(n, res, 0)
    return ys


@dataclass
class MonotonicityCheck:
    mu_hat: float
    passed: bool
    n_pairs: int
    running_min: np.ndarray
    witness: tuple[np.ndarray, np.ndarray] | None = None


def check_strong_monotonicity(
    op: Callable[[np.ndarray], np.ndarray],
    sampler: Callable[[np.random.Generator], np.ndarray],
    n_pairs: int,
    rng: np.random.Generator,
    anchor: np.ndarray | None = None,
) -> MonotonicityCheck:
    """Lower estimate of the strong-monotonicity constant of ``op``.

    Without ``anchor`` the estimate is the minimum over random pairs of
    ``<op(a) - op(b), a - b> / ||a - b||**2``. With ``anchor`` (a known
    root) the pair is ``(a, anchor)`` and ``op(anchor)`` is taken as zero,
    which is the one-sided form used for the main operator.
    """
    if n_pairs < 100:
        raise ValueError("n_pairs must be >= 100")
    running = np.empty(n_pairs)
    best = math.inf
    witness = None
    op_anchor = None if anchor is None else np.asarray(op(anchor), dtype=float)
    for i in range(n_pairs):
        while True:
            a = sampler(rng)
            b = sampler(rng) if anchor is None else anchor
            diff = a - b
            nrm2 = float(diff @ diff)
            if math.sqrt(nrm2) >= 1e-12:
                break
        if anchor is None:
            q = float((op(a) - op(b)) @ diff) / nrm2
        else:
            q = float((op(a) - op_anchor) @ diff) / nrm2
        if q < best:
            best = q
            witness = (a, b)
        running[i] = best
    return MonotonicityCheck(best, best > 0, n_pairs, running, witness)


@dataclass
class NoiseCheck:
    """Monte-Carlo summary of one operator's noise at a set of probes."""

    index: int
    means: np.ndarray          # (n_probes, d)
    stds: np.ndarray           # (n_probes, d) per-coordinate sample std
    variances: np.ndarray      # (n_probes,) E||noise - mean||^2
    regressors: np.ndarray     # (n_probes, n_features) squared operator norms
    sigma_sq: float
    omegas: np.ndarray
    fit_residual: float
    envelope_holds: bool
    mean_zero: bool
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.mean_zero and self.envelope_holds


def check_noise_variance(
    noise: NoiseModel,
    system: OperatorSystem,
    probes: Sequence[IterateState],
    n_samples: int,
    seed: int = 0,
    indices: Sequence[int] | None = None,
) -> dict[int, NoiseCheck]:
    """Conditional mean and variance of the noise at probe states.

    For each operator index (0 = main) the variance is regressed on the
    squared operator norms appearing in the variance bound: ``||h_n||**2``
    for secondary noise, ``(||v||**2, sum_n ||h_n||**2)`` for main noise.
    The fit is non-negative least squares; the bound is then required to
    hold at every probe with 5% slack. The mean-zero test flags any
    coordinate whose mean exceeds ``4 * std / sqrt(n_samples)``.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    if indices is None:
        indices = range(system.n_secondary + 1)
    out = {}
    for n in indices:
        means, stds, variances, feats = [], [], [], []
        for p, state in enumerate(probes):
            streams = RandomStreams(seed, "noise-check", p)
            draws = np.stack([noise.sample(n, state, system, streams.at(j)) for j in range(n_samples)])
            mean = draws.mean(axis=0)
            std = draws.std(axis=0, ddof=1)
            means.append(mean)
            stds.append(std)
            variances.append(float(((draws - mean) ** 2).sum(axis=1).mean()))
            v_sq = float(np.sum(system.main(state.x, state.ys) ** 2))
            h_sq = [float(np.sum(system.secondary(m, state.x, state.ys) ** 2)) for m in range(1, system.n_secondary + 1)]
            feats.append([h_sq[n - 1]] if n else [v_sq, sum(h_sq)])
        means, stds = np.array(means), np.array(stds)
        variances, feats = np.array(variances), np.array(feats)
        design = np.column_stack([feats, np.ones(len(variances))])
        coef, resid = nnls(design, variances)
        fitted = design @ coef
        envelope = bool(np.all(variances <= 1.05 * fitted + 1e-12))
        mean_zero = bool(np.all(np.abs(means) <= 4 * stds / math.sqrt(n_samples) + 1e-15))
        out[n] = NoiseCheck(
            index=n,
            means=means,
            stds=stds,
            variances=variances,
            regressors=feats,
            sigma_sq=float(coef[-1]),
            omegas=coef[:-1],
            fit_residual=float(resid),
            envelope_holds=envelope,
            mean_zero=mean_zero,
            n_samples=n_samples,
        )
    return out


@dataclass
class LipschitzReport:
    mu: list[float]
    ell: list[float]                 # condition (a) constants
    ell_A: list[float]
    ell_A_bound: list[float]
    ell_b: list[float]
    L_y_a: list[float]               # ell_n / mu_n
    L_y_b: list[float]               # ell_b/mu + ell_b' ell_A / mu^2
    L_y_composed: list[float]        # Lipschitz constants of the composed fixed points
    ell0: float
    L_v: float
    ell_v: list[float]
    empirical_y: list[float] = field(default_factory=list)
    empirical_v: float = float("nan")

    @property
    def L_y(self) -> list[float]:
        return [min(a, b) for a, b in zip(self.L_y_a, self.L_y_b)]

    @property
    def within_bounds(self) -> bool:
        ok = all(e <= b + 1e-9 for e, b in zip(self.empirical_y, self.L_y))
        return ok and (math.isnan(self.empirical_v) or self.empirical_v <= self.L_v + 1e-9)


def _spec_y_star(spec: LinearInstanceSpec, n: int, z: Sequence[np.ndarray]) -> np.ndarray:
    rhs = spec.c[n - 1].copy()
    for i, blk in enumerate(spec.B[n - 1]):
        rhs = rhs + blk @ z[i]
    return -np.linalg.solve(spec.A[n - 1], rhs)


def lipschitz_constants(
    spec: LinearInstanceSpec,
    n_probes: int = 1000,
    rng: np.random.Generator | None = None,
) -> LipschitzReport:
    """Fixed-point Lipschitz constants from their closed-form bounds plus
    empirical probes.

    For the affine form ``A_n`` is constant, so ``ell_A = 0`` and the
    second term of the condition-(b) bound vanishes (the bound on
    ``||b_n||`` is irrelevant). Probes change one argument at a time and
    record ``||y*(z') - y*(z)|| / ||z'_i - z_i||``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    N, dims = spec.N, spec.dims
    mu = [spec.mu(n) for n in range(1, N + 1)]
    normA = [float(np.linalg.norm(a, 2)) for a in spec.A]
    ell_b = [max(float(np.linalg.norm(b, 2)) for b in row) for row in spec.B]
    ell = [max(a, b) for a, b in zip(normA, ell_b)]
    ell_A = [0.0] * N
    L_a = [l / m for l, m in zip(ell, mu)]
    L_b = [lb / m for lb, m in zip(ell_b, mu)]
    L_y = [min(a, b) for a, b in zip(L_a, L_b)]
    composed: list[float] = []
    for n in range(N):
        composed.append(L_y[n] * (1 + sum(composed)))
    ell0 = max([float(np.linalg.norm(spec.M, 2))] + [float(np.linalg.norm(c, 2)) for c in spec.C])
    L_v = ell0 * (1 + sum(composed))
    ell_v = [ell0 * float(np.prod([1 + L_y[i] for i in range(n + 1, N)])) for n in range(N)]

    empirical = []
    for n in range(1, N + 1):
        worst = 0.0
        for _ in range(n_probes):
            z = [rng.standard_normal(dims[i]) for i in range(n)]
            i = int(rng.integers(n))
            z2 = list(z)
            z2[i] = z[i] + rng.standard_normal(dims[i]) * rng.uniform(0.01, 2.0)
            dz = np.linalg.norm(z2[i] - z[i])
            ratio = np.linalg.norm(_spec_y_star(spec, n, z2) - _spec_y_star(spec, n, z)) / dz
            worst = max(worst, float(ratio))
        empirical.append(worst)

    _, _, M_eff, _ = composed_affine_maps(spec)
    emp_v = 0.0
    for _ in range(n_probes):
        dx = rng.standard_normal(dims[0])
        emp_v = max(emp_v, float(np.linalg.norm(M_eff @ dx) / np.linalg.norm(dx)))

    return LipschitzReport(
        mu=mu,
        ell=ell,
        ell_A=ell_A,
        ell_A_bound=normA,
        ell_b=ell_b,
        L_y_a=L_a,
        L_y_b=L_b,
        L_y_composed=composed,
        ell0=ell0,
        L_v=L_v,
        ell_v=ell_v,
        empirical_y=empirical,
        empirical_v=emp_v,
    )


@dataclass
class AssumptionReport:
    mu_hat: list[float]
    ell_hat: list[float]
    mu0_hat: float | None
    primitive: bool
    noise: dict[int, dict]
    verdicts: dict[str, bool]
    samples: dict[str, int]
    lipschitz: LipschitzReport | None = None
    witnesses: dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        def clean(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (np.floating, np.integer)):
                return o.item()
            if isinstance(o, dict):
                return {str(k): clean(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [clean(v) for v in o]
            return o

        out = {
            "mu_hat": self.mu_hat,
            "ell_hat": self.ell_hat,
            "mu0_hat": self.mu0_hat,
            "primitive": self.primitive,
            "noise": self.noise,
            "verdicts": self.verdicts,
            "samples": self.samples,
            "witnesses": {k: clean(v) for k, v in self.witnesses.items()},
        }
        if self.lipschitz is not None:
            out["lipschitz"] = clean(self.lipschitz.__dict__)
        return clean(out)


def _empirical_ell(op, sampler, n_pairs, rng):
    worst = 0.0
    for _ in range(n_pairs):
        a, b = sampler(rng), sampler(rng)
        d = np.linalg.norm(a - b)
        if d > 1e-12:
            worst = max(worst, float(np.linalg.norm(op(a) - op(b)) / d))
    return worst


def check_assumptions(
    system: OperatorSystem,
    noise: NoiseModel | None,
    *,
    spec: LinearInstanceSpec | None = None,
    n_pairs: int = 2000,
    n_probes: int = 8,
    n_samples: int = 10_000,
    scale: float = 2.0,
    seed: int = 0,
) -> AssumptionReport:
    """Run every applicable checker on ``system`` and collect verdicts."""
    rng = np.random.default_rng(seed)
    N, dims = system.n_secondary, system.dims
    verdicts: dict[str, bool] = {}
    witnesses: dict[str, object] = {}
    mu_hat, ell_hat = [], []
    for n in range(1, N + 1):
        x = scale * rng.standard_normal(dims[0])
        prefix = [scale * rng.standard_normal(dims[i]) for i in range(1, n)]

        def op(y, x=x, prefix=prefix, n=n):
            return system.secondary(n, x, [*prefix, y])

        def sampler(r, d=dims[n]):
            return scale * r.standard_normal(d)

        chk = check_strong_monotonicity(op, sampler, n_pairs, rng)
        mu_hat.append(chk.mu_hat)
        ell_hat.append(_empirical_ell(op, sampler, min(n_pairs, 500), rng))
        verdicts[f"strong_monotonicity_h{n}"] = chk.passed
        if not chk.passed:
            witnesses[f"strong_monotonicity_h{n}"] = chk.witness

    mu0_hat = None
    primitive = system.x_star is None
    if system.has_oracle and system.x_star is not None:

        def reduced(x):
            return system.main(x, system.y_diamond(x))

        def xs(r):
            return system.x_star + scale * r.standard_normal(dims[0])

        chk = check_strong_monotonicity(reduced, xs, n_pairs, rng, anchor=system.x_star)
        mu0_hat = chk.mu_hat
        verdicts["strong_monotonicity_v"] = chk.passed
        if not chk.passed:
            witnesses["strong_monotonicity_v"] = chk.witness

    noise_out: dict[int, dict] = {}
    if noise is not None:
        probes = []
        for _ in range(n_probes):
            probes.append(
                IterateState(0, scale * rng.standard_normal(dims[0]), tuple(scale * rng.standard_normal(d) for d in dims[1:]))
            )
        checks = check_noise_variance(noise, system, probes, n_samples, seed=seed)
        for n, c in checks.items():
            noise_out[n] = {
                "sigma_sq": c.sigma_sq,
                "omega": c.omegas.tolist(),
                "fit_residual": c.fit_residual,
                "envelope_holds": c.envelope_holds,
                "mean_zero": c.mean_zero,
            }
            verdicts[f"noise_martingale_{n}"] = c.mean_zero
            verdicts[f"noise_variance_{n}"] = c.envelope_holds

    lip = None
    if spec is not None:
        lip = lipschitz_constants(spec, rng=rng)
        verdicts["fixed_point_lipschitz"] = lip.within_bounds

    return AssumptionReport(
        mu_hat=mu_hat,
        ell_hat=ell_hat,
        mu0_hat=mu0_hat,
        primitive=primitive,
        noise=noise_out,
        verdicts=verdicts,
        samples={"pairs": n_pairs, "noise_probes": n_probes if noise else 0, "noise_samples": n_samples if noise else 0},
        lipschitz=lip,
        witnesses=witnesses,
    )
