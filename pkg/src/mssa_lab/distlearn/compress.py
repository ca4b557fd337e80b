"""Unbiased random sparsification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CompressorSpec", "sparsify", "sparsify_count"]


def _check_rate(p: float) -> float:
    p = float(p)
    if not (0.0 < p <= 1.0):
        raise ValueError(f"compression rate must lie in (0, 1], got {p}")
    return p


def sparsify_count(x, p: float, rng: np.random.Generator | None) -> tuple[np.ndarray, int]:
    """Keep each entry with probability ``p`` scaled by ``1/p``; also return
    the number of kept entries. Works elementwise on any array shape.

    ``p = 1`` returns an exact copy without touching ``rng``.
    """
    p = _check_rate(p)
    x = np.asarray(x, dtype=float)
    if p == 1.0:
        return x.copy(), int(x.size)
    if rng is None:
        raise ValueError("a generator is needed for p < 1")
    keep = rng.random(x.shape) < p
    return np.where(keep, x / p, 0.0), int(keep.sum())


def sparsify(x, p: float, rng: np.random.Generator | None) -> np.ndarray:
    return sparsify_count(x, p, rng)[0]


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "sparsify"
    p: float = 1.0

    def __post_init__(self):
        if self.kind != "sparsify":
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        _check_rate(self.p)

    @property
    def omega(self) -> float:
        """Variance factor ``(1 - p) / p``."""
        return (1.0 - self.p) / self.p

    def __call__(self, x, rng):
        return sparsify(x, self.p, rng)

    def apply(self, x, rng) -> tuple[np.ndarray, int]:
        return sparsify_count(x, self.p, rng)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p}
