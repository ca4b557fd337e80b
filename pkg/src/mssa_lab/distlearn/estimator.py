"""Binary squared-hinge SVM trained by compressed local-momentum SGD."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .compress import CompressorSpec
from .sim import DistConfig, run_distributed
from .svm import SVMProblem

__all__ = ["CompressedMomentumSVM"]


class CompressedMomentumSVM(ClassifierMixin, BaseEstimator):
    """Rows are shuffled and dealt round-robin to ``n_nodes`` simulated
    nodes. Steps follow ``alpha_scale / (k + 1 + offset)`` and
    ``beta_scale / (k + 1 + offset)``; momenta are sparsified at rate ``p``
    before each server average.
    """

    def __init__(
        self,
        n_nodes: int = 4,
        lam: float = 0.5,
        p: float = 1.0,
        alpha_scale: float = 4.0,
        beta_scale: float = 4.0,
        offset: float = 10.0,
        batch_size: int = 10,
        max_iter: int = 10000,
        random_state: int = 0,
    ):
        self.n_nodes = n_nodes
        self.lam = lam
        self.p = p
        self.alpha_scale = alpha_scale
        self.beta_scale = beta_scale
        self.offset = offset
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.classes_.shape[0] != 2:
            raise ValueError(f"binary labels required, got {self.classes_.shape[0]} classes")
        if self.n_nodes < 1 or X.shape[0] < self.n_nodes:
            raise ValueError("need 1 <= n_nodes <= n_samples")
        t = np.where(y == self.classes_[1], 1.0, -1.0)
        perm = np.random.default_rng(self.random_state).permutation(X.shape[0])
        shards = [(X[perm[n :: self.n_nodes]], t[perm[n :: self.n_nodes]]) for n in range(self.n_nodes)]
        self.problem_ = SVMProblem.from_shards(shards, self.lam)
        config = DistConfig.inverse_k(
            self.alpha_scale, self.beta_scale, self.offset,
            K=self.max_iter, seed=self.random_state, batch_size=self.batch_size,
        )
        self.trajectory_ = run_distributed(self.problem_, CompressorSpec(p=self.p), config)
        if self.trajectory_.failure:
            raise FloatingPointError(self.trajectory_.failure)
        x = self.trajectory_.final_state.x
        self.coef_ = x[:-1].copy()
        self.intercept_ = float(x[-1])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, self.classes_[1], self.classes_[0])
