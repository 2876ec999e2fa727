"""Treatment-effect estimation: honest causal forest and known-effect mode.

The effect is the absolute reduction in onset probability,
``E[y | x, untreated] - E[y | x, treated]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import Panel
from .learners.gbdt import _check_X
from .learners.serialize import register
from .learners.tree import CAUSAL, GrowParams, Tree, bin_features, grow, subset_order
from .risk import panel_matrix, view_columns


@dataclass
class CausalForestParams:
    n_estimators: int = 10
    max_features: int | None = 10
    max_depth: int | None = 5
    min_samples_leaf: int = 100
    min_treated_per_leaf: int = 10
    subsample: float = 0.5
    honest_fraction: float = 0.5

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if not 0 < self.subsample <= 1 or not 0 < self.honest_fraction < 1:
            raise ValueError("subsample must lie in (0, 1] and honest_fraction in (0, 1)")


@dataclass
class CausalForest:
    trees: list
    params: CausalForestParams
    n_features: int
    seed: int | None = None
    input_names: tuple | None = None
    feature_view: str = "full"
    pooled_years: bool = True
    split_samples: list = field(default_factory=list)
    estimation_samples: list = field(default_factory=list)

    def predict_raw(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def to_dict(self) -> dict:
        return {"kind": "causal_forest", "params": asdict(self.params),
                "n_features": self.n_features, "seed": self.seed,
                "input_names": None if self.input_names is None else list(self.input_names),
                "feature_view": self.feature_view, "pooled_years": self.pooled_years,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "CausalForest":
        names = d.get("input_names")
        return cls([Tree.from_dict(t) for t in d["trees"]], CausalForestParams(**d["params"]),
                   d["n_features"], d.get("seed"), None if names is None else tuple(names),
                   d.get("feature_view", "full"), d.get("pooled_years", True))


register("causal_forest", CausalForest)


def _leaf_ok(nt, nc, params) -> bool:
    return nt >= params.min_treated_per_leaf and nc >= 1


def _honest_tree(data, order1, stats, X, t, y, est_rows, params, rng) -> Tree:
    d = data.n_features
    gp = GrowParams(crit=CAUSAL, max_depth=params.max_depth,
                    min_samples_split=2 * params.min_samples_leaf,
                    min_samples_leaf=params.min_samples_leaf,
                    min_treated=params.min_treated_per_leaf, min_control=1,
                    max_features=None if params.max_features is None or params.max_features >= d
                    else params.max_features)
    (feat, thr, left, right), _, _ = grow(data, order1, stats, gp, rng)
    left, right = left.copy(), right.copy()
    m = len(feat)
    probe = Tree(feat, thr, left, right, np.zeros(m), np.zeros(m))
    leaf = probe.apply(X[est_rows])
    te, ye = t[est_rows], y[est_rows]
    nt = np.bincount(leaf, weights=te, minlength=m)
    st = np.bincount(leaf, weights=te * ye, minlength=m)
    nc = np.bincount(leaf, weights=1 - te, minlength=m)
    sc = np.bincount(leaf, weights=(1 - te) * ye, minlength=m)
    # children always carry larger indices than their parent
    for i in range(m - 1, -1, -1):
        if left[i] < 0:
            continue
        li, ri = left[i], right[i]
        for a in (nt, st, nc, sc):
            a[i] = a[li] + a[ri]
        bad = ((left[li] < 0 and not _leaf_ok(nt[li], nc[li], params))
               or (left[ri] < 0 and not _leaf_ok(nt[ri], nc[ri], params)))
        if bad:
            left[i] = right[i] = -1
    # compact: keep reachable nodes only
    keep, stack = [], [0]
    while stack:
        i = stack.pop()
        keep.append(i)
        if left[i] >= 0:
            stack += [right[i], left[i]]
    keep.sort()
    remap = {old: new for new, old in enumerate(keep)}
    k = np.asarray(keep)
    new_left = np.array([remap[left[i]] if left[i] >= 0 else -1 for i in keep], dtype=np.int64)
    new_right = np.array([remap[right[i]] if right[i] >= 0 else -1 for i in keep], dtype=np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = sc[k] / nc[k] - st[k] / nt[k]
    tau = np.where(np.isfinite(tau), tau, 0.0)
    feat_k = np.where(new_left >= 0, feat[k], -1)
    thr_k = np.where(new_left >= 0, thr[k], 0.0)
    return Tree(feat_k, thr_k, new_left, new_right, tau, nt[k] + nc[k])


def fit_causal_forest_arrays(X, treated, y, params: CausalForestParams | None = None,
                             seed=None, input_names=None) -> CausalForest:
    """Honest causal forest on a design matrix, binary treatment and binary outcome."""
    params = params or CausalForestParams()
    X = _check_X(X)
    t = np.asarray(treated, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if len(t) != n or len(y) != n:
        raise ValueError("X, treated and y must have the same length")
    if not t.any():
        raise ValueError("no treated units; use the known-effect mode (EffectSpec(mode='known'))")
    if t.all():
        raise ValueError("no untreated units to contrast against")
    data = bin_features(X)
    stats = np.column_stack([t, t * y, 1 - t, (1 - t) * y])
    n_sub = max(2, int(math.floor(params.subsample * n)))
    n_split = max(1, int(round(params.honest_fraction * n_sub)))
    trees, s1_list, s2_list = [], [], []
    for child in np.random.SeedSequence(seed).spawn(params.n_estimators):
        rng = np.random.default_rng(child)
        sub = rng.choice(n, size=n_sub, replace=False)
        s1, s2 = np.sort(sub[:n_split]), np.sort(sub[n_split:])
        mask = np.zeros(n, dtype=bool)
        mask[s1] = True
        order1 = subset_order(data.order, mask)
        trees.append(_honest_tree(data, order1, stats, X, t, y, s2, params, rng))
        s1_list.append(s1)
        s2_list.append(s2)
    names = None if input_names is None else tuple(input_names)
    return CausalForest(trees, params, X.shape[1], seed, names,
                        split_samples=s1_list, estimation_samples=s2_list)


def effect_rows(panel: Panel, before_year: int | None = None) -> np.ndarray:
    window = np.ones(len(panel), bool) if before_year is None else panel.year < before_year
    return np.flatnonzero(window & panel.labeled())


def effect_design(panel: Panel, rows, view: str = "full", pooled_years: bool = True,
                  year=None) -> np.ndarray:
    X = panel_matrix(panel, rows, view)
    if not pooled_years:
        return X
    yr = panel.year[rows] if year is None else np.full(len(rows), year)
    return np.column_stack([X, yr.astype(float)])


def fit_causal_forest(panel: Panel, params: CausalForestParams | None = None, seed=None, *,
                      before_year: int | None = None, pooled_years: bool = True,
                      feature_view: str = "full") -> CausalForest:
    """Fit on labelled records before ``before_year``.

    Pooled mode fits one forest over all years with the year as an extra
    input; otherwise only the most recent year in the window is used.
    """
    rows = effect_rows(panel, before_year)
    if len(rows) and not pooled_years:
        rows = rows[panel.year[rows] == panel.year[rows].max()]
    if len(rows) == 0:
        raise ValueError("no labelled records to estimate treatment effects from")
    if not panel.treated[rows].any():
        raise ValueError("no treated units; use the known-effect mode (EffectSpec(mode='known'))")
    X = effect_design(panel, rows, feature_view, pooled_years)
    names = view_columns(panel.feature_names, feature_view) + (["year"] if pooled_years else [])
    forest = fit_causal_forest_arrays(X, panel.treated[rows], panel.onset_next[rows], params,
                                      seed, names)
    forest.feature_view = feature_view
    forest.pooled_years = pooled_years
    return forest


def estimate_cate(model: CausalForest, x, clip: bool = True):
    """Average of per-tree leaf effects, clipped to [0, 1] unless ``clip=False``.
    Returns a float for a single vector and an array for a matrix."""
    x = np.asarray(x, dtype=float)
    raw = model.predict_raw(x)
    out = np.clip(raw, 0.0, 1.0) if clip else raw
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class EffectSpec:
    mode: str = "forest"  # "forest" or "known"
    known_gamma: float = 0.58
    decay: bool = False
    start_year: int | None = None

    def __post_init__(self):
        if self.mode not in ("forest", "known"):
            raise ValueError(f"effect mode must be 'forest' or 'known', got {self.mode!r}")
        if not 0.0 <= self.known_gamma <= 1.0:
            raise ValueError("known_gamma must lie in [0, 1]")


def effect_at(spec: EffectSpec, forest: CausalForest | None, x, years_since_start=0):
    """Effect for features ``x`` ``years_since_start`` years after enrolment
    (vectorized over rows of ``x`` and ``years_since_start``)."""
    yrs = np.asarray(years_since_start, dtype=float)
    if np.any(yrs < 0):
        raise ValueError("years_since_start must be >= 0")
    if spec.mode == "known":
        g = spec.known_gamma * (np.exp(-yrs) if spec.decay else np.ones_like(yrs))
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            g = np.broadcast_to(g, (x.shape[0],)).copy()
        return float(g) if np.ndim(g) == 0 else g
    if forest is None:
        raise ValueError("forest mode needs a fitted causal forest")
    return estimate_cate(forest, x)


def perturb_effects(gammas, sigma: float, seed=None) -> np.ndarray:
    """``clip(gamma + eps, 0, 1)`` with ``eps ~ N(0, sigma^2)``; identity at ``sigma=0``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    g = np.asarray(gammas, dtype=float)
    if sigma == 0:
        return g.copy()
    rng = np.random.default_rng(seed)
    return np.clip(g + rng.normal(0.0, sigma, size=g.shape), 0.0, 1.0)
