"""Bilevel problems: the sampler interface and the quadratic test family."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BilevelProblem",
    "QuadraticBilevelSpec",
    "QuadraticBilevel",
    "quadratic_bilevel",
    "identity_quadratic_spec",
    "random_quadratic_spec",
]


class BilevelProblem:
    """``min_x f(x, y*(x))`` with ``y*(x) = argmin_y g(x, y)``.

    Every derivative method takes an optional ``batch`` produced by
    :meth:`sample_f` / :meth:`sample_g`; ``batch=None`` gives the exact
    value. ``jvp_g_xy(x, y, u)`` applies the cross derivative to a
    lower-level vector ``u`` and returns an upper-level vector.
    """

    dim_x: int
    dim_y: int
    mu_g: float
    ell_g: float | None = None
    closed_form_lower: bool = False

    def sample_f(self, rng: np.random.Generator, batch_size: int):
        raise NotImplementedError

    def sample_g(self, rng: np.random.Generator, batch_size: int):
        raise NotImplementedError

    def grad_f_x(self, x, y, batch=None) -> np.ndarray:
        raise NotImplementedError

    def grad_f_y(self, x, y, batch=None) -> np.ndarray:
        raise NotImplementedError

    def grad_g_y(self, x, y, batch=None) -> np.ndarray:
        raise NotImplementedError

    def hvp_g_yy(self, x, y, u, batch=None) -> np.ndarray:
        raise NotImplementedError

    def jvp_g_xy(self, x, y, u, batch=None) -> np.ndarray:
        raise NotImplementedError

    def upper_value(self, x, y) -> float:
        raise NotImplementedError

    def lower_value(self, x, y) -> float:
        raise NotImplementedError

    def lower_solution(self, x) -> np.ndarray | None:
        """Closed-form lower-level minimiser, or ``None`` if unavailable."""
        return None

    def hypergradient(self, x) -> np.ndarray | None:
        """Closed-form hypergradient, or ``None`` if unavailable."""
        return None

    x_star: np.ndarray | None = None

    def initial_y(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.dim_y)

    def self_test(self, x, y, u, n_samples: int = 2000, batch_size: int = 1, seed: int = 0) -> dict[str, float]:
        """Largest deviation (in units of the Monte-Carlo standard error)
        between sampler means and exact maps at one point."""
        rng = np.random.default_rng(seed)
        exact = {
            "grad_f_x": self.grad_f_x(x, y),
            "grad_f_y": self.grad_f_y(x, y),
            "grad_g_y": self.grad_g_y(x, y),
            "hvp_g_yy": self.hvp_g_yy(x, y, u),
            "jvp_g_xy": self.jvp_g_xy(x, y, u),
        }
        draws = {k: [] for k in exact}
        for _ in range(n_samples):
            bf = self.sample_f(rng, batch_size)
            bg = self.sample_g(rng, batch_size)
            draws["grad_f_x"].append(self.grad_f_x(x, y, bf))
            draws["grad_f_y"].append(self.grad_f_y(x, y, bf))
            draws["grad_g_y"].append(self.grad_g_y(x, y, bg))
            draws["hvp_g_yy"].append(self.hvp_g_yy(x, y, u, bg))
            draws["jvp_g_xy"].append(self.jvp_g_xy(x, y, u, bg))
        out = {}
        for k, vals in draws.items():
            vals = np.asarray(vals)
            se = vals.std(axis=0, ddof=1) / np.sqrt(n_samples)
            dev = np.abs(vals.mean(axis=0) - exact[k])
            z = np.where(se > 0, dev / np.maximum(se, 1e-300), np.where(dev > 1e-10, np.inf, 0.0))
            out[k] = float(z.max()) if z.size else 0.0
        return out


@dataclass
class QuadraticBilevelSpec:
    """``g = 1/2 y'Hy - y'(Jx + q)``,
    ``f = 1/2 x'Px + p'x + 1/2 y'Ry + r'y + x'Sy``.

    ``sigma`` is the standard deviation of the additive Gaussian noise on
    each sampled gradient, Hessian and Jacobian entry (divided by
    ``sqrt(batch_size)``).
    """

    H: np.ndarray
    J: np.ndarray
    q: np.ndarray
    P: np.ndarray
    p: np.ndarray
    R: np.ndarray
    r: np.ndarray
    S: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("H", "J", "P", "R", "S"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("q", "p", "r"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        dy, dx = self.J.shape
        shapes = {
            "H": (dy, dy), "q": (dy,), "P": (dx, dx), "p": (dx,),
            "R": (dy, dy), "r": (dy,), "S": (dx, dy),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not np.allclose(self.H, self.H.T):
            raise ValueError("H must be symmetric")
        if np.linalg.eigvalsh(self.H)[0] <= 0:
            raise ValueError("H must be positive definite (lower level strongly convex)")
        if not (np.allclose(self.P, self.P.T) and np.allclose(self.R, self.R.T)):
            raise ValueError("P and R must be symmetric")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


class QuadraticBilevel(BilevelProblem):
    """Quadratic bilevel problem with closed-form solution bundle."""

    closed_form_lower = True

    def __init__(self, spec: QuadraticBilevelSpec):
        self.spec = spec
        s = spec
        self.dim_y, self.dim_x = s.J.shape
        eig = np.linalg.eigvalsh(s.H)
        self.mu_g = float(eig[0])
        self.ell_g = float(max(eig[-1], np.linalg.norm(s.J, 2)))
        self._Hinv = np.linalg.inv(s.H)
        self._dy = self._Hinv @ s.J                      # Jacobian of y*(x)
        # F(x) = 1/2 x'Qx + l'x + const with Q, l from substituting y*(x)
        D, e = self._dy, self._Hinv @ s.q
        self.hessian_F = s.P + s.S @ D + D.T @ s.S.T + D.T @ s.R @ D
        self.hessian_F = 0.5 * (self.hessian_F + self.hessian_F.T)
        self._lin_F = s.p + s.S @ e + D.T @ (s.R @ e + s.r)
        eigF = np.linalg.eigvalsh(self.hessian_F)
        self.mu_F = float(eigF[0])
        self.x_star = np.linalg.solve(self.hessian_F, -self._lin_F) if self.mu_F > 1e-12 else None

    # samplers -------------------------------------------------------------
    def sample_f(self, rng, batch_size=1):
        if self.spec.sigma == 0:
            return None
        sd = self.spec.sigma / np.sqrt(batch_size)
        return {"fx": sd * rng.standard_normal(self.dim_x), "fy": sd * rng.standard_normal(self.dim_y)}

    def sample_g(self, rng, batch_size=1):
        if self.spec.sigma == 0:
            return None
        sd = self.spec.sigma / np.sqrt(batch_size)
        Z = rng.standard_normal((self.dim_y, self.dim_y))
        return {
            "gy": sd * rng.standard_normal(self.dim_y),
            "H": sd * 0.5 * (Z + Z.T),
            "J": sd * rng.standard_normal((self.dim_y, self.dim_x)),
        }

    # exact and sampled maps ----------------------------------------------
    def grad_f_x(self, x, y, batch=None):
        s = self.spec
        out = s.P @ x + s.p + s.S @ y
        return out if batch is None else out + batch["fx"]

    def grad_f_y(self, x, y, batch=None):
        s = self.spec
        out = s.R @ y + s.r + s.S.T @ x
        return out if batch is None else out + batch["fy"]

    def grad_g_y(self, x, y, batch=None):
        s = self.spec
        out = s.H @ y - s.J @ x - s.q
        return out if batch is None else out + batch["gy"]

    def hvp_g_yy(self, x, y, u, batch=None):
        H = self.spec.H if batch is None else self.spec.H + batch["H"]
        return H @ u

    def jvp_g_xy(self, x, y, u, batch=None):
        J = self.spec.J if batch is None else self.spec.J + batch["J"]
        return -(J.T @ u)

    def upper_value(self, x, y):
        s = self.spec
        return float(0.5 * x @ s.P @ x + s.p @ x + 0.5 * y @ s.R @ y + s.r @ y + x @ s.S @ y)

    def lower_value(self, x, y):
        s = self.spec
        return float(0.5 * y @ s.H @ y - y @ (s.J @ x + s.q))

    # closed forms ---------------------------------------------------------
    def lower_solution(self, x):
        s = self.spec
        return self._Hinv @ (s.J @ x + s.q)

    def y2_star(self, x, y1):
        return -(self._Hinv @ self.grad_f_y(x, y1))

    def F(self, x):
        return self.upper_value(x, self.lower_solution(x))

    def hypergradient(self, x):
        """Total derivative of ``F`` through the explicit Jacobian of ``y*``."""
        y = self.lower_solution(x)
        return self.grad_f_x(x, y) + self._dy.T @ self.grad_f_y(x, y)

    def root_constant(self) -> float:
        """``C`` with ``||grad F(x)|| <= C * max(||h1||, ||h2||, ||v||)``."""
        s = self.spec
        Hi = self._Hinv
        a = s.S @ Hi + s.J.T @ Hi @ s.R @ Hi
        b = s.J.T @ Hi
        return 1.0 + float(np.linalg.norm(a, 2)) + float(np.linalg.norm(b, 2))


def quadratic_bilevel(spec: QuadraticBilevelSpec) -> QuadraticBilevel:
    return QuadraticBilevel(spec)


def identity_quadratic_spec(d: int = 2, sigma: float = 0.0) -> QuadraticBilevelSpec:
    """``g = 1/2 ||y - x||^2``, ``f = 1/2 ||y||^2``; ``F(x) = 1/2 ||x||^2``."""
    I, z = np.eye(d), np.zeros(d)
    return QuadraticBilevelSpec(H=I, J=I, q=z, P=np.zeros((d, d)), p=z, R=I, r=z, S=np.zeros((d, d)), sigma=sigma)


def random_quadratic_spec(
    dim_x: int,
    dim_y: int,
    rng: np.random.Generator,
    sigma: float = 0.0,
    mu_g: float = 1.0,
    ell_g: float = 2.0,
) -> QuadraticBilevelSpec:
    """Random instance with lower Hessian spectrum in ``[mu_g, ell_g]`` and
    a strongly convex upper objective."""
    q, _ = np.linalg.qr(rng.standard_normal((dim_y, dim_y)))
    H = (q * np.linspace(mu_g, ell_g, dim_y)) @ q.T
    J = rng.standard_normal((dim_y, dim_x))
    J *= 0.8 * mu_g / np.linalg.norm(J, 2)
    P = np.eye(dim_x) * 0.5
    R = np.eye(dim_y) * 0.5
    S = 0.1 * rng.standard_normal((dim_x, dim_y))
    return QuadraticBilevelSpec(
        H=0.5 * (H + H.T), J=J, q=rng.standard_normal(dim_y), P=P, p=rng.standard_normal(dim_x),
        R=R, r=rng.standard_normal(dim_y), S=S, sigma=sigma,
    )
