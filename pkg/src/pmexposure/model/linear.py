from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import shifted_mean
from .tree import check_X, check_Xy


@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray
    intercept: float

    def predict(self, X) -> np.ndarray:
        X = check_X(X, len(self.weights))
        return X @ self.weights + self.intercept


def fit_linear(X, y, ridge_eps: float = 1e-8) -> LinearModel:
    """Least squares with an unpenalised intercept and a tiny ridge on the weights.

    Solved through the centred normal equations
    ``(Xc'Xc + eps I) w = Xc'yc`` with ``b = mean(y) - mean(X) w``.
    """
    X, y = check_Xy(X, y)
    n, d = X.shape
    if n <= d:
        raise ValueError(f"fit_linear needs more rows than columns, got n={n}, d={d}")
    x_mean = np.array([shifted_mean(col) for col in X.T])
    y_mean = shifted_mean(y)
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ Xc + ridge_eps * np.eye(d)
    rhs = Xc.T @ yc
    try:
        w = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(A, rhs, rcond=None)[0]
    b = y_mean - float(x_mean @ w)
    if not (np.isfinite(w).all() and np.isfinite(b)):
        raise ValueError("linear fit produced non-finite coefficients")
    return LinearModel(w, float(b))
