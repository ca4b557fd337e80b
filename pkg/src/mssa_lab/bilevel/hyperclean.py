"""Data hyper-cleaning: per-sample training weights learned on a clean
validation set.

Upper variable ``lam`` (one logit per training sample), lower variable
``w`` (classifier parameters)::

    g(lam, w) = 1/n_tr sum_i sigmoid(lam_i) l(w; s_i, t_i) + mu/2 ||w||^2
    f(lam, w) = 1/n_val sum_j l(w; s_j, t_j)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .models import LinearModel, make_model
from .problems import BilevelProblem

__all__ = [
    "HypercleanSpec",
    "HypercleanProblem",
    "hyperclean_problem",
    "make_hyperclean_data",
    "one_hot",
]


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class HypercleanSpec:
    """Datasets plus model choice. Labels are integer classes; ``clean`` is
    the training-set mask of uncorrupted labels (used only for metrics)."""

    X_tr: np.ndarray
    y_tr: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    clean: np.ndarray | None = None
    n_classes: int = 2
    mu: float = 0.01
    model: str = "linear"
    hidden: int = 16
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.X_tr) == 0 or len(self.X_val) == 0:
            raise ValueError("training and validation sets must be non-empty")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        self.X_tr = np.asarray(self.X_tr, dtype=float)
        self.X_val = np.asarray(self.X_val, dtype=float)
        self.y_tr = np.asarray(self.y_tr, dtype=int)
        self.y_val = np.asarray(self.y_val, dtype=int)
        if self.X_tr.shape[0] != self.y_tr.shape[0] or self.X_val.shape[0] != self.y_val.shape[0]:
            raise ValueError("feature and label counts differ")
        if self.X_tr.shape[1] != self.X_val.shape[1]:
            raise ValueError("training and validation feature dimensions differ")
        for y in (self.y_tr, self.y_val):
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")


def make_hyperclean_data(
    n_tr: int = 500,
    n_val: int = 500,
    n_test: int = 500,
    d: int = 10,
    flip_frac: float = 0.4,
    separation: float = 2.5,
    seed: int = 0,
    **spec_kw,
) -> HypercleanSpec:
    """Two Gaussian classes with means ``+-separation/2`` along a random unit
    direction; a ``flip_frac`` share of training labels is flipped."""
    if min(n_tr, n_val, n_test, d) < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)

    def draw(n):
        y = rng.integers(0, 2, n)
        X = rng.standard_normal((n, d)) + np.outer((2 * y - 1) * separation / 2, direction)
        return X, y

    X_tr, y_tr = draw(n_tr)
    X_val, y_val = draw(n_val)
    X_test, y_test = draw(n_test)
    n_flip = int(round(flip_frac * n_tr))
    flipped = rng.choice(n_tr, size=n_flip, replace=False)
    clean = np.ones(n_tr, dtype=bool)
    clean[flipped] = False
    y_tr = y_tr.copy()
    y_tr[flipped] = 1 - y_tr[flipped]
    meta = {"seed": seed, "flip_frac": flip_frac, "separation": separation}
    return HypercleanSpec(X_tr, y_tr, X_val, y_val, X_test, y_test, clean, n_classes=2, meta=meta, **spec_kw)


class HypercleanProblem(BilevelProblem):
    def __init__(self, spec: HypercleanSpec):
        self.spec = spec
        s = spec
        self.model = make_model(s.model, s.X_tr.shape[1], s.n_classes, s.hidden)
        self.T_tr = one_hot(s.y_tr, s.n_classes)
        self.T_val = one_hot(s.y_val, s.n_classes)
        self.n_tr = s.X_tr.shape[0]
        self.n_val = s.X_val.shape[0]
        self.dim_x = self.n_tr
        self.dim_y = self.model.n_params
        # declared for the linear model; the MLP lower level is only
        # strongly convex near well-conditioned minimisers
        self.mu_g = float(s.mu)
        self.ell_g = None
        self.closed_form_lower = isinstance(self.model, LinearModel)

    # samplers: indices drawn uniformly with replacement -------------------
    def sample_f(self, rng, batch_size=100):
        return rng.integers(0, self.n_val, batch_size)

    def sample_g(self, rng, batch_size=100):
        return rng.integers(0, self.n_tr, batch_size)

    def _val(self, batch):
        if batch is None:
            return self.spec.X_val, self.T_val, np.full(self.n_val, 1.0 / self.n_val)
        return self.spec.X_val[batch], self.T_val[batch], np.full(len(batch), 1.0 / len(batch))

    def _tr(self, lam, batch):
        if batch is None:
            return self.spec.X_tr, self.T_tr, lam, 1.0 / self.n_tr
        return self.spec.X_tr[batch], self.T_tr[batch], lam[batch], 1.0 / len(batch)

    def grad_f_x(self, x, y, batch=None):
        return np.zeros(self.n_tr)

    def grad_f_y(self, x, y, batch=None):
        X, T, w = self._val(batch)
        return self.model.grad(y, X, T, w)

    def grad_g_y(self, x, y, batch=None):
        X, T, lam, scale = self._tr(x, batch)
        return self.model.grad(y, X, T, scale * expit(lam)) + self.spec.mu * y

    def hvp_g_yy(self, x, y, u, batch=None):
        X, T, lam, scale = self._tr(x, batch)
        return self.model.hvp(y, X, T, scale * expit(lam), u) + self.spec.mu * u

    def jvp_g_xy(self, x, y, u, batch=None):
        X, T, lam, scale = self._tr(x, batch)
        sig = expit(lam)
        vals = scale * sig * (1.0 - sig) * self.model.dirderiv(y, X, T, u)
        if batch is None:
            return vals
        out = np.zeros(self.n_tr)
        np.add.at(out, batch, vals)
        return out

    def upper_value(self, x, y):
        return float(self.model.losses(y, self.spec.X_val, self.T_val).mean())

    def lower_value(self, x, y):
        w = expit(x) / self.n_tr
        return float(w @ self.model.losses(y, self.spec.X_tr, self.T_tr) + 0.5 * self.spec.mu * y @ y)

    def lower_solution(self, x):
        if not self.closed_form_lower:
            return None
        w = expit(x) / self.n_tr
        return self.model.solve_weighted_ridge(self.spec.X_tr, self.T_tr, w, self.spec.mu)

    def initial_y(self, rng=None):
        return self.model.init_params(rng)

    # metrics ------------------------------------------------------------
    def accuracies(self, x, y) -> dict[str, float]:
        """``acc_test``: classifier accuracy on the test split;
        ``acc_clean``: accuracy of ``sigmoid(lam) >= 1/2`` as a clean-label
        detector."""
        s = self.spec
        out = {}
        if s.X_test is not None:
            pred = self.model.predict(y, s.X_test).argmax(axis=1)
            out["acc_test"] = float(np.mean(pred == s.y_test))
        if s.clean is not None:
            out["acc_clean"] = float(np.mean((expit(x) >= 0.5) == s.clean))
        return out


def hyperclean_problem(spec: HypercleanSpec) -> HypercleanProblem:
    return HypercleanProblem(spec)
