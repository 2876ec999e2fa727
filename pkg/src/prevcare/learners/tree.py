"""Binary decision trees: storage, growth and CART fitting."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _split
from ._split import CAUSAL, ENTROPY, NEWTON, VARIANCE

CRITERIA = {"newton": NEWTON, "variance": VARIANCE, "gini": VARIANCE,
            "entropy": ENTROPY, "causal": CAUSAL}


class TreeNode(NamedTuple):
    split_feature: int
    split_threshold: float
    left: int
    right: int
    leaf_value: float

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass(frozen=True)
class Tree:
    """Flat array representation; node 0 is the root, ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.left < 0))

    def node(self, i: int) -> TreeNode:
        return TreeNode(int(self.feature[i]), float(self.threshold[i]),
                        int(self.left[i]), int(self.right[i]), float(self.value[i]))

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _split.apply_tree(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            n_samples=np.asarray(d["n_samples"], dtype=np.float64),
        )


@dataclass
class BinnedData:
    """Feature matrix with integer codes and candidate thresholds.

    ``codes[f, i]`` counts the candidate thresholds of feature ``f`` strictly
    below ``X[i, f]``; a boundary between two sorted samples is a valid split
    only where the code changes, and its threshold is ``cuts[f][code_left]``.
    """

    X: np.ndarray
    codes: np.ndarray
    cuts: list
    order: np.ndarray

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def bin_features(X: np.ndarray, sample_cap: int | None = None,
                 rng: np.random.Generator | None = None) -> BinnedData:
    """Candidate thresholds are all distinct values, or those of a row subsample
    of size ``sample_cap`` when the data are larger than the cap."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, d = X.shape
    src = X
    if sample_cap is not None and n > sample_cap:
        rng = rng if rng is not None else np.random.default_rng(0)
        src = X[np.sort(rng.choice(n, size=int(sample_cap), replace=False))]
    codes = np.empty((d, n), dtype=np.int32)
    cuts = []
    for f in range(d):
        c = np.unique(src[:, f])
        # values above the largest cut all share one code
        cuts.append(c)
        codes[f] = np.searchsorted(c, X[:, f], side="left")
    order = np.ascontiguousarray(np.argsort(codes, axis=1, kind="stable"))
    return BinnedData(X, codes, cuts, order)


def subset_order(order: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Restrict a presorted index matrix to rows where ``mask`` is true."""
    keep = mask[order]
    d = order.shape[0]
    return np.ascontiguousarray(order[keep].reshape(d, -1))


@dataclass
class GrowParams:
    crit: int = VARIANCE
    max_leaves: int | None = None
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    min_hess: float = 1e-3
    min_treated: int = 0
    min_control: int = 0
    l1: float = 0.0
    l2: float = 0.0
    max_features: int | None = None
    min_gain: float = 1e-12


def grow(data: BinnedData, order: np.ndarray, stats: np.ndarray, params: GrowParams,
         rng: np.random.Generator | None = None):
    """Grow one tree best-first over the rows contained in ``order``.

    ``order`` is consumed (partitioned in place).  Returns ``(nodes, segments,
    order)`` where ``nodes`` holds parallel lists of split data and
    ``segments[i]`` is the ``(start, end)`` range of node ``i`` in ``order``.
    """
    X = data.X
    codes = data.codes
    d = data.n_features
    stats = np.ascontiguousarray(stats, dtype=np.float64)
    if stats.shape[1] < 4:
        stats = np.ascontiguousarray(np.hstack([stats, np.zeros((len(stats), 4 - stats.shape[1]))]))
    n_rows = order.shape[1]
    go_left = np.zeros(X.shape[0], dtype=np.bool_)
    buf = np.empty(max(n_rows, 1), dtype=np.int64)
    all_features = np.arange(d, dtype=np.int64)
    max_leaves = params.max_leaves if params.max_leaves is not None else np.inf
    max_depth = params.max_depth if params.max_depth is not None else np.inf

    feature, threshold, left, right, depth, segments = [], [], [], [], [], []

    def add_node(start, end, dep):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        depth.append(dep)
        segments.append((start, end))
        return len(feature) - 1

    def evaluate(node):
        start, end = segments[node]
        if end - start < params.min_samples_split or depth[node] >= max_depth:
            return None
        if params.max_features is not None and params.max_features < d:
            feats = np.sort(rng.choice(d, size=params.max_features, replace=False)).astype(np.int64)
        else:
            feats = all_features
        gain, f, pos = _split.best_split(
            order, codes, stats, start, end, feats, params.crit,
            params.l1, params.l2, float(params.min_samples_leaf), params.min_hess,
            float(params.min_treated), float(params.min_control))
        if f < 0 or not gain > params.min_gain:
            return None
        thr = float(data.cuts[f][codes[f, order[f, pos]]])
        return gain, f, thr

    heap = []
    root = add_node(0, n_rows, 0)
    cand = evaluate(root)
    if cand is not None:
        heapq.heappush(heap, (-cand[0], root, cand[1], cand[2]))
    n_leaves = 1
    while heap and n_leaves < max_leaves:
        _, node, f, thr = heapq.heappop(heap)
        start, end = segments[node]
        n_left = _split.partition(order, X, f, thr, start, end, go_left, buf)
        feature[node] = f
        threshold[node] = thr
        li = add_node(start, start + n_left, depth[node] + 1)
        ri = add_node(start + n_left, end, depth[node] + 1)
        left[node] = li
        right[node] = ri
        n_leaves += 1
        for child in (li, ri):
            cand = evaluate(child)
            if cand is not None:
                heapq.heappush(heap, (-cand[0], child, cand[1], cand[2]))

    nodes = (np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
             np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64))
    return nodes, segments, order


def node_sums(order: np.ndarray, segments: list, stats: np.ndarray) -> np.ndarray:
    """Per-node column sums of ``stats`` over each node's segment."""
    rows = order[0]
    csum = np.vstack([np.zeros(stats.shape[1]), np.cumsum(stats[rows], axis=0)])
    seg = np.asarray(segments)
    return csum[seg[:, 1]] - csum[seg[:, 0]]


def fit_tree(X, y, sample_weight=None, *, criterion: str = "variance",
             max_depth: int | None = None, min_samples_split: int = 2,
             min_samples_leaf: int = 1, max_leaves: int | None = None,
             max_features: int | None = None, seed: int | None = None,
             data: BinnedData | None = None, counts: np.ndarray | None = None) -> Tree:
    """CART for regression (variance) or binary classification (gini/entropy).

    Leaf values are weighted target means, i.e. class-1 probabilities for
    0/1 targets.  ``counts`` gives per-row multiplicities (bootstrap draws);
    rows with zero count are excluded.
    """
    if criterion not in ("variance", "gini", "entropy"):
        raise ValueError(f"unknown criterion {criterion!r}")
    y = np.asarray(y, dtype=np.float64)
    if data is None:
        data = bin_features(X)
    n = data.X.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    cnt = np.ones(n) if counts is None else np.asarray(counts, dtype=np.float64)
    ww = w * cnt
    stats = np.column_stack([ww * y, ww, cnt])
    order = data.order.copy() if counts is None else subset_order(data.order, cnt > 0)
    rng = np.random.default_rng(seed)
    params = GrowParams(crit=CRITERIA[criterion], max_depth=max_depth, max_leaves=max_leaves,
                        min_samples_split=min_samples_split, min_samples_leaf=min_samples_leaf,
                        max_features=max_features)
    (feat, thr, left, right), segments, order = grow(data, order, stats, params, rng)
    sums = node_sums(order, segments, stats)
    value = np.where(sums[:, 1] > 0, sums[:, 0] / np.where(sums[:, 1] > 0, sums[:, 1], 1.0), 0.0)
    return Tree(feat, thr, left, right, value, sums[:, 2])
