"""Squared-loss classifiers with flat parameter vectors.

Each model exposes, for a batch ``(X, T)`` with one-hot targets and
per-sample weights ``w``:

* ``losses``   per-sample ``1/2 ||out_i - t_i||^2``
* ``grad``     ``sum_i w_i grad l_i``
* ``dirderiv`` per-sample ``<grad l_i, u>``
* ``hvp``      ``sum_i w_i hess l_i @ u``
"""

from __future__ import annotations

import numpy as np

__all__ = ["LinearModel", "MLPModel", "make_model"]


class LinearModel:
    """Affine map ``out = [x, 1] @ Theta`` with ``Theta`` of shape ``(d+1, c)``."""

    kind = "linear"

    def __init__(self, n_features: int, n_outputs: int):
        self.n_features = int(n_features)
        self.n_outputs = int(n_outputs)
        self.n_params = (self.n_features + 1) * self.n_outputs

    def _theta(self, params):
        return params.reshape(self.n_features + 1, self.n_outputs)

    @staticmethod
    def _aug(X):
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def predict(self, params, X):
        return self._aug(X) @ self._theta(params)

    def losses(self, params, X, T):
        r = self.predict(params, X) - T
        return 0.5 * np.einsum("ij,ij->i", r, r)

    def grad(self, params, X, T, w):
        Xa = self._aug(X)
        r = Xa @ self._theta(params) - T
        return (Xa.T @ (w[:, None] * r)).ravel()

    def dirderiv(self, params, X, T, u):
        Xa = self._aug(X)
        r = Xa @ self._theta(params) - T
        return np.einsum("ij,ij->i", Xa @ self._theta(u), r)

    def hvp(self, params, X, T, w, u):
        Xa = self._aug(X)
        return (Xa.T @ (w[:, None] * (Xa @ self._theta(u)))).ravel()

    def solve_weighted_ridge(self, X, T, w, mu):
        """Minimiser of ``sum_i w_i l_i + mu/2 ||Theta||^2``."""
        Xa = self._aug(X)
        A = Xa.T @ (w[:, None] * Xa) + mu * np.eye(Xa.shape[1])
        return np.linalg.solve(A, Xa.T @ (w[:, None] * T)).ravel()


class MLPModel:
    """One hidden ``tanh`` layer: ``out = W2 tanh(W1 x + b1) + b2``.

    Curvature products use the forward-over-reverse (R-operator) pass so
    no Hessian is ever formed.
    """

    kind = "mlp"

    def __init__(self, n_features: int, n_outputs: int, hidden: int = 16):
        self.n_features = int(n_features)
        self.n_outputs = int(n_outputs)
        self.hidden = int(hidden)
        d, h, c = self.n_features, self.hidden, self.n_outputs
        self._shapes = [(h, d), (h,), (c, h), (c,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.n_params = sum(self._sizes)

    def unpack(self, params):
        out, i = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            out.append(params[i : i + size].reshape(shape))
            i += size
        return out

    @staticmethod
    def pack(*parts):
        return np.concatenate([p.ravel() for p in parts])

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = np.random.default_rng(0) if rng is None else rng
        d, h, c = self.n_features, self.hidden, self.n_outputs
        W1 = rng.standard_normal((h, d)) / np.sqrt(d)
        W2 = rng.standard_normal((c, h)) / np.sqrt(h)
        return self.pack(W1, np.zeros(h), W2, np.zeros(c))

    def _forward(self, params, X):
        W1, b1, W2, b2 = self.unpack(params)
        z = np.tanh(X @ W1.T + b1)
        return z, z @ W2.T + b2

    def predict(self, params, X):
        return self._forward(params, X)[1]

    def losses(self, params, X, T):
        r = self.predict(params, X) - T
        return 0.5 * np.einsum("ij,ij->i", r, r)

    def grad(self, params, X, T, w):
        _, _, W2, _ = self.unpack(params)
        z, out = self._forward(params, X)
        g_out = w[:, None] * (out - T)
        g_a = (g_out @ W2) * (1.0 - z * z)
        return self.pack(g_a.T @ X, g_a.sum(0), g_out.T @ z, g_out.sum(0))

    def _tangent(self, params, X, u):
        _, _, W2, _ = self.unpack(params)
        dW1, db1, dW2, db2 = self.unpack(u)
        z, out = self._forward(params, X)
        dz = (1.0 - z * z) * (X @ dW1.T + db1)
        dout = dz @ W2.T + z @ dW2.T + db2
        return z, out, dz, dout

    def dirderiv(self, params, X, T, u):
        _, out, _, dout = self._tangent(params, X, u)
        return np.einsum("ij,ij->i", out - T, dout)

    def hvp(self, params, X, T, w, u):
        _, _, W2, _ = self.unpack(params)
        _, _, dW2, _ = self.unpack(u)
        z, out, dz, dout = self._tangent(params, X, u)
        g_out = w[:, None] * (out - T)
        r_out = w[:, None] * dout
        g_z = g_out @ W2
        r_z = r_out @ W2 + g_out @ dW2
        s = 1.0 - z * z
        r_a = r_z * s - 2.0 * g_z * z * dz
        return self.pack(r_a.T @ X, r_a.sum(0), r_out.T @ z + g_out.T @ dz, r_out.sum(0))


def make_model(kind: str, n_features: int, n_outputs: int, hidden: int = 16):
    if kind == "linear":
        return LinearModel(n_features, n_outputs)
    if kind == "mlp":
        return MLPModel(n_features, n_outputs, hidden)
    raise ValueError(f"unknown model kind {kind!r}; expected 'linear' or 'mlp'")
