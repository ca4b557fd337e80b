"""Linear test systems with closed-form fixed points.

Secondary operators have the affine form ``h_n = A_n y_n + b_n`` with
``b_n = sum_i B[n][i] z_i + c_n`` over ``z = (x, y_1, ..., y_{n-1})``; the
main operator is ``v = M x + sum_n C_n y_n + c_0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import OperatorSystem

__all__ = [
    "LinearInstanceSpec",
    "make_linear_instance",
    "composed_affine_maps",
    "random_spd",
    "random_linear_spec",
    "bundled_strongly_monotone",
    "bundled_primitive",
]

REGIMES = ("strongly_monotone", "primitive")


@dataclass
class LinearInstanceSpec:
    A: list[np.ndarray]
    B: list[list[np.ndarray]]
    c: list[np.ndarray]
    M: np.ndarray
    C: list[np.ndarray]
    c0: np.ndarray
    regime: str = "strongly_monotone"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.A]
        self.B = [[np.atleast_2d(np.asarray(b, dtype=float)) for b in row] for row in self.B]
        self.c = [np.atleast_1d(np.asarray(v, dtype=float)) for v in self.c]
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.C = [np.atleast_2d(np.asarray(m, dtype=float)) for m in self.C]
        self.c0 = np.atleast_1d(np.asarray(self.c0, dtype=float))
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        N = len(self.A)
        if not (len(self.B) == len(self.c) == len(self.C) == N):
            raise ValueError("A, B, c and C must all have one entry per secondary operator")
        d0 = self.M.shape[0]
        if self.M.shape != (d0, d0) or self.c0.shape != (d0,):
            raise ValueError("M must be square and c0 must match its size")
        dims = self.dims
        for n in range(N):
            dn = dims[n + 1]
            if self.A[n].shape != (dn, dn):
                raise ValueError(f"A_{n + 1} must be square")
            if len(self.B[n]) != n + 1:
                raise ValueError(f"B_{n + 1} needs {n + 1} coupling blocks (x, y_1..y_{n})")
            for i, b in enumerate(self.B[n]):
                if b.shape != (dn, dims[i]):
                    raise ValueError(f"B_{n + 1},{i} has shape {b.shape}, expected {(dn, dims[i])}")
            if self.c[n].shape != (dn,):
                raise ValueError(f"c_{n + 1} has wrong size")
            if self.C[n].shape != (d0, dn):
                raise ValueError(f"C_{n + 1} has shape {self.C[n].shape}, expected {(d0, dn)}")
            if self.mu(n + 1) <= 0:
                raise ValueError(f"A_{n + 1} is not positive definite (singular or indefinite)")

    @property
    def N(self) -> int:
        return len(self.A)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.M.shape[0], *(a.shape[0] for a in self.A))

    def mu(self, n: int) -> float:
        """Strong-monotonicity constant of ``h_n`` in ``y_n``."""
        a = self.A[n - 1]
        return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def random_spd(d: int, rng: np.random.Generator, low: float = 1.0, high: float = 2.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.linspace(low, high, d) if d > 1 else np.array([low])
    return (q * eig) @ q.T


def composed_affine_maps(spec: LinearInstanceSpec):
    """``y_n(x) = G_n x + g_n`` for the composed fixed points and the
    reduced main operator ``v(x, y(x)) = M_eff x + m``."""
    d0 = spec.dims[0]
    Gs, gs = [], []
    for n in range(spec.N):
        lin = spec.B[n][0].copy()
        off = spec.c[n].copy()
        for i in range(1, n + 1):
            lin = lin + spec.B[n][i] @ Gs[i - 1]
            off = off + spec.B[n][i] @ gs[i - 1]
        Gs.append(-np.linalg.solve(spec.A[n], lin))
        gs.append(-np.linalg.solve(spec.A[n], off))
    M_eff = spec.M.copy()
    m = spec.c0.copy()
    for n in range(spec.N):
        M_eff = M_eff + spec.C[n] @ Gs[n]
        m = m + spec.C[n] @ gs[n]
    assert M_eff.shape == (d0, d0)
    return Gs, gs, M_eff, m


def make_linear_instance(spec: LinearInstanceSpec, name: str = "linear") -> OperatorSystem:
    """Operator system with exact fixed-point maps and, in the strongly
    monotone regime, the exact root ``x*``."""
    A, B, c = spec.A, spec.B, spec.c
    M, C, c0 = spec.M, spec.C, spec.c0
    A_inv = [np.linalg.inv(a) for a in A]

    def make_h(n):
        def h(x, ys):
            out = A[n] @ ys[n] + B[n][0] @ x + c[n]
            for i in range(n):
                out = out + B[n][i + 1] @ ys[i]
            return out

        return h

    def make_ystar(n):
        def ystar(x, ys_prev):
            rhs = B[n][0] @ x + c[n]
            for i in range(n):
                rhs = rhs + B[n][i + 1] @ ys_prev[i]
            return -(A_inv[n] @ rhs)

        return ystar

    def v(x, ys):
        out = M @ x + c0
        for n in range(len(C)):
            out = out + C[n] @ ys[n]
        return out

    Gs, gs, M_eff, m = composed_affine_maps(spec)
    x_star = None
    if spec.regime == "strongly_monotone":
        x_star = np.linalg.solve(M_eff, -m)
    constants = {
        "mu": [spec.mu(n) for n in range(1, spec.N + 1)],
        "ell": [max(np.linalg.norm(a, 2), *(np.linalg.norm(b, 2) for b in row)) for a, row in zip(A, B)],
        "mu0": float(np.linalg.eigvalsh(0.5 * (M_eff + M_eff.T))[0]),
        "M_eff": M_eff,
        "m_eff": m,
        "G": Gs,
        "g": gs,
    }
    return OperatorSystem(
        dims=spec.dims,
        main_op=v,
        secondary_ops=[make_h(n) for n in range(spec.N)],
        y_star=[make_ystar(n) for n in range(spec.N)],
        x_star=x_star,
        constants=constants,
        name=name,
    )


def random_linear_spec(
    dims,
    rng: np.random.Generator,
    regime: str = "strongly_monotone",
    mu_range: tuple[float, float] = (1.0, 2.0),
    coupling: float = 0.3,
    main_spectrum: tuple[float, float] = (1.0, 2.0),
    null_dim: int = 1,
    offset: float = 1.0,
) -> LinearInstanceSpec:
    """Random linear instance with controlled spectra.

    The reduced main operator ``M_eff`` is drawn first (SPD in the strongly
    monotone regime; symmetric PSD with ``null_dim`` zero eigenvalues in the
    primitive regime) and ``M`` is back-solved so that ``v(x, y(x))`` has
    exactly that linear part.
    """
    dims = tuple(int(d) for d in dims)
    d0, N = dims[0], len(dims) - 1
    A = [random_spd(d, rng, *mu_range) for d in dims[1:]]
    B = []
    for n in range(N):
        row = []
        for i in range(n + 1):
            blk = rng.standard_normal((dims[n + 1], dims[i]))
            blk *= coupling / max(np.linalg.norm(blk, 2), 1e-12)
            row.append(blk)
        B.append(row)
    c = [offset * rng.standard_normal(d) for d in dims[1:]]
    C = []
    for n in range(N):
        blk = rng.standard_normal((d0, dims[n + 1]))
        C.append(blk * coupling / max(np.linalg.norm(blk, 2), 1e-12))

    q, _ = np.linalg.qr(rng.standard_normal((d0, d0)))
    lo, hi = main_spectrum
    eig = np.linspace(lo, hi, d0) if d0 > 1 else np.array([lo])
    if regime == "primitive":
        if not 0 < null_dim < d0 + (d0 == 1):
            raise ValueError("null_dim must leave at least one nonzero direction")
        eig[:null_dim] = 0.0
    target = (q * eig) @ q.T
    shift = offset * rng.standard_normal(d0)
    target_offset = target @ shift

    spec = LinearInstanceSpec(A, B, c, np.zeros((d0, d0)), C, np.zeros(d0), regime)
    Gs, gs, M_eff0, m0 = composed_affine_maps(spec)
    spec.M = target - M_eff0
    spec.c0 = target_offset - m0
    spec.meta = {"main_eigs": eig.tolist(), "shift": shift}
    return spec


def bundled_strongly_monotone(seed: int = 20240611) -> LinearInstanceSpec:
    """N=2 instance with d0=d1=d2=4 used by the rate checks."""
    return random_linear_spec((4, 4, 4), np.random.default_rng(seed), "strongly_monotone")


def bundled_primitive(seed: int = 20240612) -> LinearInstanceSpec:
    """N=2 instance whose reduced main operator is the gradient of a convex
    quadratic with a one-dimensional null space."""
    return random_linear_spec((4, 4, 4), np.random.default_rng(seed), "primitive", null_dim=1)
