"""Gradient-boosted decision trees for binary classification (logistic loss)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .tree import GrowParams, NEWTON, Tree, bin_features, grow, node_sums

_MARGIN_CLIP = 30.0


@dataclass
class GbdtParams:
    n_trees: int = 100
    n_leaves: int = 31
    learning_rate: float = 0.1
    min_child_samples: int = 20
    reg_l1: float = 0.0
    reg_l2: float = 0.0
    class_weight: str | None = None  # None or "balanced"
    bin_sample_cap: int | None = None
    max_depth: int | None = None

    def __post_init__(self):
        if self.class_weight not in (None, "none", "balanced"):
            raise ValueError(f"class_weight must be None or 'balanced', got {self.class_weight!r}")
        if self.class_weight == "none":
            self.class_weight = None
        if self.n_trees < 0 or self.n_leaves < 2:
            raise ValueError("n_trees must be >= 0 and n_leaves >= 2")


@dataclass
class GbdtModel:
    trees: list
    learning_rate: float
    base_score: float
    params: GbdtParams
    n_features: int
    seed: int | None = None
    train_loss: list = field(default_factory=list)

    def raw_score(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return expit(np.clip(self.raw_score(X), -_MARGIN_CLIP, _MARGIN_CLIP))

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "params": asdict(self.params),
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "seed": self.seed,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=d["learning_rate"],
            base_score=d["base_score"],
            params=GbdtParams(**d["params"]),
            n_features=d["n_features"],
            seed=d.get("seed"),
            train_loss=list(d.get("train_loss", [])),
        )


def _check_X(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    return np.ascontiguousarray(X)


def check_binary(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != n_rows:
        raise ValueError(f"{n_rows} rows but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError(
            "labels are all identical; nothing to learn - use a prior-only model "
            f"(constant probability {y.mean():.3f}) instead")
    return y


def class_weights(y: np.ndarray, mode: str | None) -> np.ndarray:
    if mode != "balanced":
        return np.ones_like(y)
    n, n_pos = len(y), y.sum()
    return np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))


def logloss(y, p, w=None) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    ll = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    if w is None:
        return float(ll.mean())
    return float(np.sum(w * ll) / np.sum(w))


def fit_gbdt(X, y, params: GbdtParams | None = None, seed: int | None = None) -> GbdtModel:
    """Newton-boosted trees on binary cross-entropy with leaf-wise growth.

    Leaf values are ``-soft(G, l1) / (H + l2)``; the stored training loss
    trajectory (weighted logloss, one entry per round plus the prior) is
    non-increasing for learning rates in the usual range.
    """
    params = params or GbdtParams()
    X = _check_X(X)
    y = check_binary(y, X.shape[0])
    if X.shape[0] < params.min_child_samples:
        raise ValueError(f"need at least min_child_samples={params.min_child_samples} rows")
    rng = np.random.default_rng(seed)
    w = class_weights(y, params.class_weight)
    p0 = np.sum(w * y) / np.sum(w)
    base = float(np.log(p0 / (1 - p0)))
    data = bin_features(X, params.bin_sample_cap, rng)
    grow_params = GrowParams(crit=NEWTON, max_leaves=params.n_leaves, max_depth=params.max_depth,
                             min_samples_split=2 * params.min_child_samples,
                             min_samples_leaf=params.min_child_samples,
                             l1=params.reg_l1, l2=params.reg_l2)
    F = np.full(len(y), base)
    losses = [logloss(y, expit(F), w)]
    trees = []
    ones = np.ones(len(y))
    for _ in range(params.n_trees):
        p = expit(F)
        g = w * (p - y)
        h = w * p * (1 - p)
        stats = np.column_stack([g, h, ones])
        (feat, thr, left, right), segments, order = grow(data, data.order.copy(), stats, grow_params, rng)
        sums = node_sums(order, segments, stats)
        G, H = sums[:, 0], sums[:, 1]
        value = -np.sign(G) * np.maximum(np.abs(G) - params.reg_l1, 0.0) / (H + params.reg_l2)
        tree = Tree(feat, thr, left, right, value, sums[:, 2])
        trees.append(tree)
        leaves = np.flatnonzero(left < 0)
        for leaf in leaves:
            start, end = segments[leaf]
            F[order[0, start:end]] += params.learning_rate * value[leaf]
        losses.append(logloss(y, expit(F), w))
    return GbdtModel(trees, params.learning_rate, base, params, X.shape[1], seed, losses)
