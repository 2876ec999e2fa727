"""L1/L2-regularised linear models fitted by (proximal) Newton iterations.

Objective, with ``f = intercept + X @ weights`` and an unpenalised intercept::

    mean(loss(y, f)) + alpha * ||w||_1          (penalty="l1")
    mean(loss(y, f)) + alpha / 2 * ||w||_2^2    (penalty="l2")

``loss`` is the logistic loss (0/1 labels) or half squared error.  L1 uses
coordinate descent on the local quadratic model, L2 a damped Newton step.
Both stop once the (sub)gradient norm falls below ``tol``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .gbdt import _MARGIN_CLIP


@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: float
    penalty: str
    alpha: float
    loss: str = "logistic"
    n_iter: int = 0
    grad_norm: float = 0.0

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def raw_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return self.intercept + X @ self.weights

    def predict_proba(self, X) -> np.ndarray:
        return expit(np.clip(self.raw_score(X), -_MARGIN_CLIP, _MARGIN_CLIP))

    def to_dict(self) -> dict:
        return {"kind": "linear", "weights": self.weights.tolist(), "intercept": self.intercept,
                "penalty": self.penalty, "alpha": self.alpha, "loss": self.loss}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.asarray(d["weights"], dtype=np.float64), d["intercept"], d["penalty"],
                   d["alpha"], d.get("loss", "logistic"))


def _derivs(loss: str, y, f):
    if loss == "logistic":
        p = expit(f)
        val = np.logaddexp(0.0, f) - y * f
        return val, p - y, np.maximum(p * (1 - p), 1e-12)
    r = f - y
    return 0.5 * r * r, r, np.ones_like(f)


def objective(w, b, X, y, penalty, alpha, loss="logistic") -> float:
    f = b + X @ w
    val, _, _ = _derivs(loss, y, f)
    pen = alpha * np.abs(w).sum() if penalty == "l1" else 0.5 * alpha * w @ w
    return float(val.mean() + pen)


def _subgrad_norm(gw, gb, w, penalty, alpha):
    if penalty == "l2":
        g = gw + alpha * w
    else:
        g = np.where(w != 0, gw + alpha * np.sign(w), np.sign(gw) * np.maximum(np.abs(gw) - alpha, 0.0))
    return float(np.sqrt(g @ g + gb * gb))


def fit_linear(X, y, penalty: str = "l1", alpha: float = 1.0, seed: int | None = None, *,
               loss: str = "logistic", tol: float = 1e-6, max_iter: int = 500) -> LinearModel:
    """``seed`` is accepted for interface symmetry; the solver is deterministic."""
    if penalty not in ("l1", "l2"):
        raise ValueError(f"penalty must be 'l1' or 'l2', got {penalty!r}")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if loss not in ("logistic", "squared"):
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in X or y")
    n, d = X.shape
    w = np.zeros(d)
    if loss == "logistic":
        m = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        b = float(np.log(m / (1 - m)))
    else:
        b = float(y.mean())
    obj = objective(w, b, X, y, penalty, alpha, loss)
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = b + X @ w
        _, g1, h1 = _derivs(loss, y, f)
        gw = X.T @ g1 / n
        gb = float(g1.mean())
        gnorm = _subgrad_norm(gw, gb, w, penalty, alpha)
        if gnorm < tol:
            break
        if penalty == "l2":
            dw, db = _newton_step(X, h1, gw, gb, w, alpha)
        else:
            dw, db = _cd_step(X, h1, gw, gb, w, alpha)
        # backtracking on the true objective
        t = 1.0
        while True:
            w_new, b_new = w + t * dw, b + t * db
            obj_new = objective(w_new, b_new, X, y, penalty, alpha, loss)
            if obj_new <= obj + 1e-12 or t < 1e-10:
                break
            t *= 0.5
        if obj_new > obj + 1e-12:
            break
        w, b, obj = w_new, b_new, obj_new
    f = b + X @ w
    _, g1, _ = _derivs(loss, y, f)
    gnorm = _subgrad_norm(X.T @ g1 / n, float(g1.mean()), w, penalty, alpha)
    return LinearModel(w, float(b), penalty, float(alpha), loss, it, gnorm)


def _newton_step(X, h1, gw, gb, w, alpha):
    n, d = X.shape
    Xa = np.hstack([np.ones((n, 1)), X])
    H = (Xa * h1[:, None]).T @ Xa / n
    H[1:, 1:] += alpha * np.eye(d)
    g = np.concatenate([[gb], gw + alpha * w])
    step = -np.linalg.solve(H + 1e-12 * np.eye(d + 1), g)
    return step[1:], float(step[0])


def _cd_step(X, h1, gw, gb, w, alpha, sweeps: int = 100, tol: float = 1e-12):
    """Minimise the local quadratic model plus the L1 term by coordinate descent."""
    n, d = X.shape
    hw = h1 / n
    diag = (X * X).T @ hw
    hsum = hw.sum()
    dw = np.zeros(d)
    db = 0.0
    # r = X @ dw + db, the step expressed in sample space
    r = np.zeros(n)
    for _ in range(sweeps):
        max_change = 0.0
        # intercept
        grad_b = gb + hw @ r
        delta = -grad_b / hsum
        db += delta
        r += delta
        max_change = max(max_change, abs(delta))
        for j in range(d):
            if diag[j] <= 0:
                continue
            grad_j = gw[j] + (X[:, j] * hw) @ r
            z = w[j] + dw[j] - grad_j / diag[j]
            new = np.sign(z) * max(abs(z) - alpha / diag[j], 0.0)
            delta = new - (w[j] + dw[j])
            if delta != 0.0:
                dw[j] += delta
                r += delta * X[:, j]
                max_change = max(max_change, abs(delta))
        if max_change < tol:
            break
    return dw, db
