"""Classifier that learns per-sample training weights with SOBA."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .hyperclean import HypercleanSpec, hyperclean_problem
from .soba import SOBAConfig, soba_run

__all__ = ["HypercleanSOBA"]


class HypercleanSOBA(ClassifierMixin, BaseEstimator):
    """Squared-loss classifier trained on possibly corrupted labels.

    ``fit`` takes a (noisy) training set and a clean validation set; when
    no validation set is given, ``validation_fraction`` of the training
    rows is held out. After fitting, ``sample_weight_`` holds
    ``sigmoid(lam_i)``, the learned probability that row ``i`` is clean.
    """

    def __init__(
        self,
        model: str = "linear",
        mu: float = 0.01,
        variant: str = "ST",
        alpha_scale: float = 100.0,
        beta_scale: float = 1.0,
        batch_size: int = 100,
        max_iter: int = 5000,
        hidden: int = 16,
        validation_fraction: float = 0.5,
        random_state: int = 0,
    ):
        self.model = model
        self.mu = mu
        self.variant = variant
        self.alpha_scale = alpha_scale
        self.beta_scale = beta_scale
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.hidden = hidden
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> SOBAConfig:
        if self.variant not in ("ST", "TT"):
            raise ValueError(f"variant must be 'ST' or 'TT', got {self.variant!r}")
        make = SOBAConfig.st if self.variant == "ST" else SOBAConfig.tt
        return make(self.alpha_scale, self.beta_scale, batch_size=self.batch_size, K=self.max_iter, seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y)
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1)")
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            val, tr = perm[:n_val], perm[n_val:]
            X, y, X_val, y_val = X[tr], y[tr], X[val], y[val]
        else:
            X_val, y_val = check_X_y(X_val, y_val)
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("validation features have a different width")
        self.classes_ = np.unique(np.concatenate([y, y_val]))
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        enc = {c: i for i, c in enumerate(self.classes_)}
        spec = HypercleanSpec(
            X, np.array([enc[c] for c in y]), X_val, np.array([enc[c] for c in y_val]),
            n_classes=len(self.classes_), mu=self.mu, model=self.model, hidden=self.hidden,
        )
        self.problem_ = hyperclean_problem(spec)
        self.trajectory_ = soba_run(self.problem_, self._config(), record_stride=max(1, self.max_iter // 100), metrics=[])
        state = self.trajectory_.final_state
        self.lam_ = state.x
        self.params_ = state.ys[0]
        self.sample_weight_ = expit(self.lam_)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.problem_.model.predict(self.params_, X)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
