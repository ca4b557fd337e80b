"""Single-loop stochastic bilevel optimisation as a three-sequence system.

``y_1`` tracks the lower-level minimiser, ``y_2`` the solution of
``hess_yy g . y_2 = -grad_y f`` and ``x`` descends along
``grad_x f + hess_xy g . y_2``. All three updates use the same incoming
iterate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from ..core import IterateState, NoiseModel, OperatorSystem, StepSchedule, Trajectory, run_mssa, schedule_value
from .problems import BilevelProblem

__all__ = [
    "SOBAConfig",
    "SobaNoise",
    "HypergradientError",
    "conjugate_gradient",
    "soba_system",
    "soba_run",
    "hypergradient_oracle",
    "lint_soba_config",
]

TT_EXPONENTS = (0.6, 0.4)


def _decay_order(s: StepSchedule) -> float:
    return s.exponent if s.kind == "poly" else 0.0


@dataclass(frozen=True)
class SOBAConfig:
    """Step schedules for ``(x, y_1, y_2)`` plus sampling settings.

    ``ST`` requires the three schedules to share kind and exponent;
    ``TT`` requires ``alpha`` to decay strictly faster than both betas.
    """

    variant: str
    alpha: StepSchedule
    beta1: StepSchedule
    beta2: StepSchedule
    batch_size: int = 100
    K: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("ST", "TT"):
            raise ValueError(f"variant must be 'ST' or 'TT', got {self.variant!r}")
        if self.batch_size < 1 or self.K < 1:
            raise ValueError("batch_size and K must be >= 1")
        scheds = (self.alpha, self.beta1, self.beta2)
        if self.variant == "ST":
            kinds = {s.kind for s in scheds}
            orders = {_decay_order(s) for s in scheds}
            if len(kinds) != 1 or len(orders) != 1:
                raise ValueError("ST schedules must share kind and exponent")
        else:
            a = _decay_order(self.alpha)
            if not (a > _decay_order(self.beta1) and a > _decay_order(self.beta2)):
                raise ValueError("TT requires alpha to decay strictly faster than beta1 and beta2")

    @classmethod
    def st(cls, alpha_scale: float, beta_scale: float | None = None, exponent: float = 0.5, **kw) -> "SOBAConfig":
        beta_scale = alpha_scale if beta_scale is None else beta_scale
        a = StepSchedule("poly", alpha_scale, exponent)
        b = StepSchedule("poly", beta_scale, exponent)
        return cls("ST", a, b, b, **kw)

    @classmethod
    def tt(cls, alpha_scale: float, beta_scale: float | None = None, exponents=TT_EXPONENTS, **kw) -> "SOBAConfig":
        beta_scale = alpha_scale if beta_scale is None else beta_scale
        a = StepSchedule("poly", alpha_scale, exponents[0])
        b = StepSchedule("poly", beta_scale, exponents[1])
        return cls("TT", a, b, b, **kw)

    @classmethod
    def constant(cls, alpha: float, beta: float, **kw) -> "SOBAConfig":
        a, b = StepSchedule("constant", alpha), StepSchedule("constant", beta)
        return cls("ST", a, b, b, **kw)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "alpha": self.alpha.to_dict(),
            "beta1": self.beta1.to_dict(),
            "beta2": self.beta2.to_dict(),
            "batch_size": self.batch_size,
            "K": self.K,
            "seed": self.seed,
        }


class HypergradientError(RuntimeError):
    def __init__(self, stage: str, residual: float, iterations: int, tol: float):
        self.stage = stage
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{stage} did not reach tol {tol:g}: residual {residual:.3e} after {iterations} iterations")


def conjugate_gradient(matvec, b, tol: float, max_iter: int | None = None, x0=None):
    """Solve ``A z = b`` for symmetric positive definite ``A`` given as a
    matvec. Returns ``(z, residual_norm, iterations)``; raises
    :class:`HypergradientError` on a non-positive curvature direction or when
    ``max_iter`` is exhausted."""
    b = np.asarray(b, dtype=float)
    max_iter = 10 * b.shape[0] + 100 if max_iter is None else max_iter
    z = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(z)
    p = r.copy()
    rr = float(r @ r)
    for it in range(max_iter):
        if np.sqrt(rr) <= tol:
            return z, float(np.sqrt(rr)), it
        Ap = matvec(p)
        curv = float(p @ Ap)
        if curv <= 0:
            raise HypergradientError("linear solve (non-positive curvature)", float(np.sqrt(rr)), it, tol)
        step = rr / curv
        z += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(b - matvec(z)))
    if res <= tol:
        return z, res, max_iter
    raise HypergradientError("linear solve", res, max_iter, tol)


def _lower_minimiser(problem: BilevelProblem, x, tol, y0=None, max_iter=20000):
    y = problem.lower_solution(x)
    if y is not None:
        return y, float(np.linalg.norm(problem.grad_g_y(x, y))), 0
    y = problem.initial_y() if y0 is None else np.array(y0, dtype=float)
    it = 0
    try:
        problem.lower_value(x, y)
        has_value = True
    except NotImplementedError:
        has_value = False
    if has_value:
        res = minimize(
            lambda z: (problem.lower_value(x, z), problem.grad_g_y(x, z)),
            y, jac=True, method="L-BFGS-B",
            options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 20},
        )
        y, it = res.x, int(res.nit)
    else:
        step = 1.0 / (problem.ell_g or 1.0)
        for it in range(max_iter):
            g = problem.grad_g_y(x, y)
            if np.linalg.norm(g) <= tol:
                break
            y = y - step * g
    # Newton polish: curvature products and CG give quadratic convergence near the minimiser
    for _ in range(50):
        g = problem.grad_g_y(x, y)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return y, gn, it
        delta, _, _ = conjugate_gradient(lambda u: problem.hvp_g_yy(x, y, u), -g, 0.1 * tol)
        y = y + delta
        it += 1
    gn = float(np.linalg.norm(problem.grad_g_y(x, y)))
    if gn <= tol:
        return y, gn, it
    raise HypergradientError("lower-level minimisation", gn, it, tol)


def hypergradient_oracle(problem: BilevelProblem, x, inner_tol: float = 1e-10, *, y0=None, return_parts: bool = False):
    """Exact hypergradient ``grad_x f + hess_xy g . y_2*`` at ``y_1 = y*(x)``.

    ``y*(x)`` comes from the closed form when the problem has one,
    otherwise from quasi-Newton descent polished by Newton-CG steps;
    ``y_2*`` solves ``hess_yy g . y_2 = -grad_y f`` by conjugate gradients.
    Both stop at residual ``inner_tol``.
    """
    x = np.asarray(x, dtype=float)
    y1, res1, it1 = _lower_minimiser(problem, x, inner_tol, y0)
    if res1 > inner_tol:
        raise HypergradientError("lower-level minimisation", res1, it1, inner_tol)
    rhs = -problem.grad_f_y(x, y1)
    y2, res2, it2 = conjugate_gradient(lambda u: problem.hvp_g_yy(x, y1, u), rhs, inner_tol)
    grad = problem.grad_f_x(x, y1) + problem.jvp_g_xy(x, y1, y2)
    if return_parts:
        return grad, {"y1": y1, "y2": y2, "lower_residual": res1, "linear_residual": res2, "iterations": (it1, it2)}
    return grad


def soba_system(problem: BilevelProblem, name: str = "") -> OperatorSystem:
    """``h_1 = grad_y g``, ``h_2 = grad_y f + hess_yy g . y_2``,
    ``v = grad_x f + hess_xy g . y_2`` on dims ``(d_x, d_y, d_y)``."""

    def h1(x, ys):
        return problem.grad_g_y(x, ys[0])

    def h2(x, ys):
        y1, y2 = ys
        return problem.grad_f_y(x, y1) + problem.hvp_g_yy(x, y1, y2)

    def v(x, ys):
        y1, y2 = ys
        return problem.grad_f_x(x, y1) + problem.jvp_g_xy(x, y1, y2)

    y_star = None
    if problem.closed_form_lower:

        def y1_star(x, prefix):
            return problem.lower_solution(x)

        def y2_star(x, prefix):
            y1 = prefix[0]
            z, _, _ = conjugate_gradient(lambda u: problem.hvp_g_yy(x, y1, u), -problem.grad_f_y(x, y1), 1e-12)
            return z

        y_star = (y1_star, y2_star)
    constants = {"mu": [problem.mu_g, problem.mu_g]}
    if problem.ell_g is not None:
        constants["ell"] = [problem.ell_g, problem.ell_g]
    return OperatorSystem(
        (problem.dim_x, problem.dim_y, problem.dim_y), v, (h1, h2),
        y_star=y_star, x_star=problem.x_star, constants=constants,
        name=name or type(problem).__name__,
    )


class SobaNoise(NoiseModel):
    """Mini-batch evaluation of the three operators. Each operator draws
    its own batches (``zeta`` from the upper distribution, ``phi`` from the
    lower one) so the five samples per step are independent."""

    def __init__(self, problem: BilevelProblem, batch_size: int = 100):
        self.problem = problem
        self.batch_size = int(batch_size)

    def evaluate(self, n, state, system, streams):
        p, b = self.problem, self.batch_size
        x, ys = state.x, state.ys
        if n == 1:
            return p.grad_g_y(x, ys[0], p.sample_g(streams.get("phi", 1), b))
        bf = p.sample_f(streams.get("zeta", n), b)
        bg = p.sample_g(streams.get("phi", n), b)
        y1, y2 = ys
        if n == 2:
            return p.grad_f_y(x, y1, bf) + p.hvp_g_yy(x, y1, y2, bg)
        return p.grad_f_x(x, y1, bf) + p.jvp_g_xy(x, y1, y2, bg)


def soba_run(
    problem: BilevelProblem,
    config: SOBAConfig,
    *,
    x0=None,
    metrics=None,
    record_stride: int | None = None,
    record_at=None,
    running_average: bool = False,
    grad_metric: bool | None = None,
    extra_metrics=None,
) -> Trajectory:
    """Run SOBA through :func:`run_mssa`.

    Rows carry the operator residuals, ``upper_value`` (``f`` at
    ``(x, y_1)``) and, when ``grad_metric`` is true or the problem has a
    closed-form hypergradient, ``grad_F_sq``.
    """
    system = soba_system(problem)
    x = np.zeros(problem.dim_x) if x0 is None else np.array(x0, dtype=float)
    y1 = problem.initial_y(np.random.default_rng([config.seed, 1]))
    init = IterateState(0, x, (np.asarray(y1, dtype=float), np.zeros(problem.dim_y)))

    extra = {"upper_value": lambda s: problem.upper_value(s.x, s.ys[0])}
    has_closed = problem.hypergradient(x) is not None
    if grad_metric is None:
        grad_metric = has_closed
    if grad_metric:
        if has_closed:
            extra["grad_F_sq"] = lambda s: float(np.sum(problem.hypergradient(s.x) ** 2))
        else:
            extra["grad_F_sq"] = lambda s: float(np.sum(hypergradient_oracle(problem, s.x, 1e-8) ** 2))
    extra.update(extra_metrics or {})
    names = ["v_sq", "h1_sq", "h2_sq"] if metrics is None else list(metrics)

    noise = SobaNoise(problem, config.batch_size)
    traj = run_mssa(
        system, init, (config.alpha, [config.beta1, config.beta2]), noise, config.K, config.seed,
        record_stride, record_at=record_at, metrics=names, extra_metrics=extra,
        running_average=running_average,
    )
    traj.meta["soba"] = config.to_dict()
    return traj


def lint_soba_config(problem: BilevelProblem, config: SOBAConfig) -> list[str]:
    """Warn when a lower-level step exceeds ``mu_g / ell_g**2``, the largest
    step for which the lower updates contract."""
    if problem.ell_g is None:
        return []
    bound = problem.mu_g / problem.ell_g**2
    msgs = []
    for name, sched in (("beta1", config.beta1), ("beta2", config.beta2)):
        peak = schedule_value(sched, 0)
        if peak > bound:
            msgs.append(f"{name} peaks at {peak:.4g}, above mu_g/ell_g^2 = {bound:.4g}")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)
    return msgs
