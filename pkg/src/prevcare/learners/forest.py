"""Bagged CART classifier with per-split feature subsampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .gbdt import _check_X, check_binary, class_weights
from .tree import Tree, bin_features, fit_tree

_EPS = 1e-6


@dataclass
class ForestParams:
    n_trees: int = 100
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: str | int | None = "sqrt"  # "sqrt", "log2", "all"/None or an int
    criterion: str = "gini"
    class_weight: str | None = None
    max_depth: int | None = None
    bootstrap: bool = True
    max_samples: float = 1.0

    def __post_init__(self):
        if self.class_weight == "none":
            self.class_weight = None
        if self.criterion not in ("gini", "entropy"):
            raise ValueError(f"criterion must be 'gini' or 'entropy', got {self.criterion!r}")

    def resolve_max_features(self, d: int) -> int | None:
        mf = self.max_features
        if mf in (None, "all"):
            return None
        if mf == "sqrt":
            return max(1, int(np.sqrt(d)))
        if mf == "log2":
            return max(1, int(np.log2(d)))
        return min(int(mf), d)


@dataclass
class ForestModel:
    trees: list
    params: ForestParams
    n_features: int
    seed: int | None = None
    oob_proba: np.ndarray | None = None

    def predict_proba(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        p = np.mean([t.predict(X) for t in self.trees], axis=0)
        return np.clip(p, _EPS, 1 - _EPS)

    def raw_score(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return np.log(p / (1 - p))

    def oob_error(self, y) -> float:
        if self.oob_proba is None:
            raise ValueError("no out-of-bag predictions (bootstrap disabled?)")
        ok = ~np.isnan(self.oob_proba)
        return float(np.mean((self.oob_proba[ok] >= 0.5) != (np.asarray(y)[ok] == 1)))

    def to_dict(self) -> dict:
        return {"kind": "random_forest", "params": asdict(self.params),
                "n_features": self.n_features, "seed": self.seed,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], ForestParams(**d["params"]),
                   d["n_features"], d.get("seed"))


def fit_random_forest(X, y, params: ForestParams | None = None, seed: int | None = None) -> ForestModel:
    params = params or ForestParams()
    X = _check_X(X)
    y = check_binary(y, X.shape[0])
    n, d = X.shape
    data = bin_features(X)
    w = class_weights(y, params.class_weight)
    mf = params.resolve_max_features(d)
    n_draw = max(1, int(round(params.max_samples * n)))
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(params.n_trees):
        rng = np.random.default_rng(child)
        if params.bootstrap:
            counts = np.bincount(rng.integers(0, n, size=n_draw), minlength=n).astype(float)
        elif n_draw < n:
            counts = np.zeros(n)
            counts[rng.choice(n, size=n_draw, replace=False)] = 1.0
        else:
            counts = None
        tree = fit_tree(X, y, w, criterion=params.criterion, max_depth=params.max_depth,
                        min_samples_split=params.min_samples_split,
                        min_samples_leaf=params.min_samples_leaf, max_features=mf,
                        seed=int(rng.integers(2**63)), data=data, counts=counts)
        trees.append(tree)
        if counts is not None:
            out = counts == 0
            if out.any():
                oob_sum[out] += tree.predict(X[out])
                oob_cnt[out] += 1
    oob = np.where(oob_cnt > 0, oob_sum / np.maximum(oob_cnt, 1), np.nan) if oob_cnt.any() else None
    return ForestModel(trees, params, d, seed, oob)
