"""Multi-output ridge regression with an unpenalised intercept."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trees import SERIAL_VERSION


@dataclass(frozen=True)
class LinearModel:
    """``Y = X @ weight + bias``; one joint weight matrix for all outputs."""

    weight: np.ndarray
    bias: np.ndarray
    ridge: float = 0.0
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("linear model coefficients must be finite")

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weight + self.bias

    def to_dict(self):
        return {"kind": self.kind, "version": SERIAL_VERSION, "ridge": self.ridge,
                "weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SERIAL_VERSION or d.get("kind") != "linear":
            raise ValueError("not a supported linear model document")
        return cls(np.array(d["weight"], dtype=float), np.array(d["bias"], dtype=float), float(d["ridge"]))


def fit_linear(X, Y, ridge: float = 0.0) -> LinearModel:
    """Solve the ridge normal equations on centred data.

    Raises ``np.linalg.LinAlgError`` when ``ridge == 0`` and the centred
    design is rank deficient.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Y2 = Y[:, None] if Y.ndim == 1 else Y
    if len(X) != len(Y2) or len(X) == 0:
        raise ValueError(f"X {X.shape} and Y {Y.shape} disagree or are empty")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    x_mu, y_mu = X.mean(axis=0), Y2.mean(axis=0)
    Xc, Yc = X - x_mu, Y2 - y_mu
    gram = Xc.T @ Xc
    if ridge == 0.0 and np.linalg.matrix_rank(Xc) < X.shape[1]:
        raise np.linalg.LinAlgError("design matrix is rank deficient; use ridge > 0")
    W = np.linalg.solve(gram + ridge * np.eye(X.shape[1]), Xc.T @ Yc)
    b = y_mu - x_mu @ W
    if Y.ndim == 1:
        W, b = W[:, 0], b[0]
    return LinearModel(W, np.asarray(b), float(ridge))
