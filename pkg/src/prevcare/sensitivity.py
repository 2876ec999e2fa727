"""Robustness studies: noisy effects, training-size convergence, omitted-variable
bias bounds with effect subgroups, and feature importance."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import econ
from .cohort import GenConfig, Panel, generate_synthetic_cohort
from .effect import perturb_effects
from .learners.gbdt import logloss
from .learners.tree import VARIANCE, GrowParams, Tree, bin_features, grow, node_sums
from .policy import select_topk
from .risk import RiskModel, fit_risk_arrays
from .simulation import ModelCache, ScenarioConfig, load_scenario_panel, map_ordered, run_scenario, seeded

__all__ = ["perturb_effects", "noise_robustness_study", "ConvergenceConfig", "convergence_study",
           "ols", "ovb_arrays", "ovb_sensitivity", "cate_subgroups", "permutation_importance",
           "shapley_values", "feature_importance", "OVB_COVARIATES"]

OVB_COVARIATES = ("age", "sex", "weight", "bmi", "systolic_bp", "diastolic_bp", "height")
NOISE_HEADER = ("sigma", "seed", "prevented_onsets", "cost_savings")
CONVERGENCE_HEADER = ("n_train", "seed", "prevented", "oracle", "ratio")
OVB_HEADER = ("group", "multiplier", "estimate", "se", "ci_low", "ci_high", "r2_dz_x", "r2_yz_dx",
              "adjusted_estimate", "adjusted_se", "adjusted_ci_low", "adjusted_ci_high")
IMPORTANCE_HEADER = ("rank", "feature", "importance", "sign")


# --------------------------------------------------------------------------- noisy effects

def _noise_one(args):
    config, sigmas, seed = args
    base = config if seed is None else seeded(config, seed)
    panel = load_scenario_panel(base)
    cache = ModelCache()
    label = base.seeds.model if seed is None else seed
    rows = []
    for sigma in sigmas:
        cfg = base.with_(effect_noise_sd=float(sigma))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = run_scenario(cfg, panel, cache)
        rows.append({"sigma": float(sigma), "seed": label,
                     "prevented_onsets": econ.prevented_onsets(res),
                     "cost_savings": econ.cost_savings(res, cfg.cost_params)})
    return rows


def noise_robustness_study(config: ScenarioConfig, sigmas=(0.0, 0.1, 0.5), seeds=None,
                           threads: int = 1) -> list:
    """Prevented onsets and savings when allocation sees ``clip(gamma + N(0, sigma^2))``.

    Outcomes are still accounted with the undisturbed effects.  ``seeds=None``
    runs the config's own seeds once; otherwise every seed sets all four
    scenario seeds and is shared across the sigma values (paired design).
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or min(sigmas) < 0:
        raise ValueError("sigmas must be a non-empty list of non-negative values")
    jobs = [(config, sigmas, None if seeds is None else int(s)) for s in ([None] if seeds is None else seeds)]
    return [r for rows in map_ordered(_noise_one, jobs, threads) for r in rows]


def mean_by(rows: list, key: str, value: str) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


# --------------------------------------------------------------------------- convergence

@dataclass
class ConvergenceConfig:
    n_train_values: list = field(default_factory=lambda: [250, 500, 1000, 3000, 5000, 10000])
    n_population: int = 10_000
    budget_k: int = 1_000
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # "oracle" ranks by the generating risk itself
    learner: str = "ridge"
    hyperparameters: dict = field(default_factory=dict)
    calibration_folds: int = 3
    cohort: GenConfig = field(default_factory=GenConfig)

    def __post_init__(self):
        if isinstance(self.cohort, dict):
            self.cohort = GenConfig.from_dict(self.cohort)
        vals = list(self.n_train_values)
        if not vals or min(vals) < 2:
            raise ValueError("n_train_values must be non-empty and >= 2")
        if not 0 <= self.budget_k <= self.n_population:
            raise ValueError("budget_k must lie in [0, n_population]")


def _single_year(cohort: GenConfig, n: int, seed: int) -> Panel:
    d = cohort.to_dict()
    d.update(n_patients=int(n), horizon=1, treated_fraction=0.0, seed=int(seed))
    return generate_synthetic_cohort(GenConfig.from_dict(d))


def _convergence_one(args):
    cfg, seed = args
    ss = np.random.SeedSequence(int(seed)).spawn(3)
    pop_seed, train_seed, fit_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss)
    gamma = cfg.cohort.true_effect
    pop = _single_year(cfg.cohort, cfg.n_population, pop_seed)
    ids = list(pop.patient_id)
    p_true = pop.true_risk
    gammas = dict.fromkeys(ids, gamma)
    tie = int(seed)
    best = select_topk(dict(zip(ids, p_true.tolist())), gammas, cfg.budget_k, tie)
    mask = np.isin(pop.patient_id, list(best))
    oracle = gamma * float(p_true[mask].sum())
    train = None
    if cfg.learner != "oracle":
        train = _single_year(cfg.cohort, max(cfg.n_train_values), train_seed)
    rows = []
    for n_train in cfg.n_train_values:
        if cfg.learner == "oracle":
            h = p_true
        else:
            # nested prefixes of one training draw keep the curve paired
            lab = np.flatnonzero(train.labeled())[: int(n_train)]
            model = fit_risk_arrays(train.features[lab], train.onset_next[lab], cfg.learner,
                                    fit_seed, hyperparameters=cfg.hyperparameters,
                                    calibration_folds=cfg.calibration_folds,
                                    input_names=pop.feature_names)
            h = model.predict(pop.features)
        chosen = select_topk(dict(zip(ids, h.tolist())), gammas, cfg.budget_k, tie)
        prevented = gamma * float(p_true[np.isin(pop.patient_id, list(chosen))].sum())
        rows.append({"n_train": int(n_train), "seed": int(seed), "prevented": prevented,
                     "oracle": oracle, "ratio": prevented / oracle if oracle > 0 else 1.0})
    return rows


def convergence_study(config: ConvergenceConfig | None = None, threads: int = 1) -> list:
    """Prevented onsets of a risk-ranked allocation with a known constant effect,
    against the allocation ranked by the generating risk, per training size.

    Prevented onsets are expected values, ``gamma * sum of true onset
    probabilities`` over the enrolled set.
    """
    cfg = config or ConvergenceConfig()
    jobs = [(cfg, s) for s in cfg.seeds]
    return [r for rows in map_ordered(_convergence_one, jobs, threads) for r in rows]


# --------------------------------------------------------------------------- omitted-variable bias

@dataclass
class OLSFit:
    coef: np.ndarray
    se: np.ndarray
    df: int

    @property
    def t(self) -> np.ndarray:
        return self.coef / self.se


def ols(y, X) -> OLSFit:
    """Least squares with classical standard errors; ``X`` must include any intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p or np.linalg.matrix_rank(X) < p:
        raise ValueError("regression design is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    df = n - p
    sigma2 = resid @ resid / df
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return OLSFit(coef, np.sqrt(np.diag(cov)), df)


def _partial_r2(t: float, df: int) -> float:
    return t * t / (t * t + df)


def ovb_arrays(y, treated, covariates, names, benchmark: str, multipliers=(0.2, 0.5, 0.8),
               alpha: float = 0.05) -> list:
    """Bias-adjusted treatment coefficient for a confounder ``m`` times as strong
    as ``benchmark`` (in partial R-squared with treatment and with outcome).

    The adjustment moves the estimate towards zero; intervals are analytic.
    """
    names = list(names)
    if benchmark not in names:
        raise ValueError(f"benchmark covariate {benchmark!r} not among {names}")
    Z = np.asarray(covariates, dtype=float)
    d = np.asarray(treated, dtype=float)
    n = len(d)
    one = np.ones((n, 1))
    out_fit = ols(y, np.hstack([one, d[:, None], Z]))
    trt_fit = ols(d, np.hstack([one, Z]))
    j = names.index(benchmark)
    r2_dx = _partial_r2(trt_fit.t[1 + j], trt_fit.df)
    r2_yx = _partial_r2(out_fit.t[2 + j], out_fit.df)
    if r2_dx <= 0 or r2_yx <= 0:
        raise ValueError(f"benchmark {benchmark!r} has zero partial R-squared; no scale for the bound")
    est, se, df = float(out_fit.coef[1]), float(out_fit.se[1]), out_fit.df
    q = stats.t.ppf(1 - alpha / 2, df)
    q_adj = stats.t.ppf(1 - alpha / 2, df - 1)
    rows = []
    for m in multipliers:
        m = float(m)
        if m < 0:
            raise ValueError("multipliers must be >= 0")
        if m * r2_dx >= 1:
            raise ValueError(f"multiplier {m} makes the confounder explain all treatment variation")
        r2_dz = m * r2_dx / (1 - r2_dx)
        r2_zx = m * r2_dx ** 2 / ((1 - m * r2_dx) * (1 - r2_dx))
        r2_yz = ((math.sqrt(m) + math.sqrt(r2_zx)) / math.sqrt(1 - r2_zx)) ** 2 * (r2_yx / (1 - r2_yx))
        if r2_yz > 1:
            warnings.warn(f"multiplier {m}: implied outcome partial R-squared capped at 1", stacklevel=2)
            r2_yz = 1.0
        if r2_dz >= 1:
            raise ValueError(f"multiplier {m} implies a treatment partial R-squared >= 1")
        bias = se * math.sqrt(r2_yz * r2_dz / (1 - r2_dz)) * math.sqrt(df)
        adj = est - math.copysign(bias, est) if est != 0 else est - bias
        adj_se = se * math.sqrt((1 - r2_yz) / (1 - r2_dz)) * math.sqrt(df / (df - 1))
        rows.append({"multiplier": m, "estimate": est, "se": se, "ci_low": est - q * se,
                     "ci_high": est + q * se, "r2_dz_x": r2_dz, "r2_yz_dx": r2_yz,
                     "adjusted_estimate": adj, "adjusted_se": adj_se,
                     "adjusted_ci_low": adj - q_adj * adj_se, "adjusted_ci_high": adj + q_adj * adj_se})
    return rows


def ovb_sensitivity(panel: Panel, covariates=OVB_COVARIATES, benchmark: str = "age",
                    multipliers=(0.2, 0.5, 0.8), rows=None, alpha: float = 0.05) -> list:
    """Linear-probability regression of next-year onset on treatment and
    ``covariates`` over labelled records (optionally restricted to ``rows``)."""
    covariates = list(covariates)
    missing = [c for c in covariates if c not in panel.feature_names]
    if missing:
        raise ValueError(f"panel lacks covariates {missing}")
    lab = np.flatnonzero(panel.labeled())
    if rows is not None:
        lab = np.intersect1d(lab, np.asarray(rows, dtype=int))
    Z = panel.features[np.ix_(lab, [panel.feature_index(c) for c in covariates])]
    return ovb_arrays(panel.onset_next[lab], panel.treated[lab], Z, covariates, benchmark,
                      multipliers, alpha)


def cate_subgroups(cate, features, n_groups: int = 4, min_samples_leaf: int = 1) -> np.ndarray:
    """Group labels from a shallow regression tree fit to effect estimates.

    The tree has at most ``n_groups`` leaves and depth ``ceil(log2(n_groups))``;
    labels ``A, B, ...`` follow increasing mean effect.
    """
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    if n_groups > 26:
        raise ValueError("at most 26 groups")
    tau = np.asarray(cate, dtype=float).ravel()
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(tau) != X.shape[0]:
        raise ValueError("cate and features must have the same number of rows")
    centred = tau - tau.mean() if len(tau) else tau
    data = bin_features(X)
    st = np.column_stack([centred, np.ones(len(tau)), np.ones(len(tau))])
    # relative gain floor: exact-constant children must not split on rounding noise
    floor = 1e-9 * max(float(centred @ centred), 1e-300)
    params = GrowParams(crit=VARIANCE, max_depth=int(math.ceil(math.log2(n_groups))),
                        max_leaves=n_groups, min_samples_leaf=min_samples_leaf, min_gain=floor)
    (feat, thr, left, right), segments, order = grow(data, data.order.copy(), st, params)
    sums = node_sums(order, segments, st)
    tree = Tree(feat, thr, left, right, sums[:, 0] / np.maximum(sums[:, 1], 1), sums[:, 2])
    leaf = tree.apply(X)
    leaves = np.unique(leaf)
    means = np.array([tau[leaf == lf].mean() for lf in leaves])
    rank = {lf: r for r, lf in enumerate(leaves[np.argsort(means, kind="stable")])}
    if len(leaves) < n_groups:
        warnings.warn(f"only {len(leaves)} distinct effect group(s) found, fewer than {n_groups}",
                      stacklevel=2)
    return np.array([chr(ord("A") + rank[lf]) for lf in leaf], dtype="<U1")


# --------------------------------------------------------------------------- importance

def permutation_importance(model: RiskModel, X, y, n_repeats: int = 5, seed=0) -> np.ndarray:
    """Log-loss increase per shuffled column, shape ``(n_features, n_repeats)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("importance needs non-empty data")
    base = logloss(y, model.predict(X))
    rng = np.random.default_rng(seed)
    out = np.empty((X.shape[1], n_repeats))
    for j in range(X.shape[1]):
        Xp = X.copy()
        for r in range(n_repeats):
            Xp[:, j] = X[rng.permutation(X.shape[0]), j]
            out[j, r] = logloss(y, model.predict(Xp)) - base
    return out


def shapley_values(f, X, n_permutations: int = 50, n_explain: int = 200, n_background: int = 100,
                   seed=0):
    """Monte Carlo Shapley values of ``f`` for ``n_explain`` sampled rows.

    Each sampled ordering walks from a background row to the explained row
    one feature at a time; the marginal change is credited to that feature.
    Returns ``(rows, phi)`` with ``phi`` of shape ``(len(rows), n_features)``.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("importance needs non-empty data")
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=min(n_explain, n), replace=False))
    bg = X[rng.choice(n, size=min(n_background, n), replace=False)]
    phi = np.zeros((len(rows), d))
    for i, r in enumerate(rows):
        perms = np.argsort(rng.random((n_permutations, d)), axis=1)
        z = bg[rng.integers(0, len(bg), size=n_permutations)]
        path = np.repeat(z[:, None, :], d + 1, axis=1)
        for step in range(d):
            cols = perms[:, step]
            path[:, step + 1:, :][np.arange(n_permutations), :, cols] = X[r, cols][:, None]
        vals = np.asarray(f(path.reshape(-1, d)), dtype=float).reshape(n_permutations, d + 1)
        delta = np.diff(vals, axis=1)
        np.add.at(phi[i], perms.ravel(), delta.ravel())
        phi[i] /= n_permutations
    return rows, phi


def _signs(X, out) -> np.ndarray:
    signs = np.zeros(X.shape[1], dtype=int)
    if np.std(out) == 0:
        return signs
    for j in range(X.shape[1]):
        if np.std(X[:, j]) > 0:
            signs[j] = int(np.sign(np.corrcoef(X[:, j], out)[0, 1]))
    return signs


def feature_importance(model: RiskModel, data, method: str = "permutation", seed=0, *,
                       n_repeats: int = 5, n_permutations: int = 50, n_explain: int = 200,
                       n_background: int = 100) -> list:
    """Ranked ``(feature, importance, sign)`` for a fitted risk model.

    ``data`` is ``(X, y)`` in the model's input space.  Permutation importance
    is the mean log-loss increase; sampled Shapley importance is the mean
    absolute contribution to the uncalibrated score.  The sign is that of the
    correlation between the feature and the predicted risk.
    """
    X, y = data
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("importance needs non-empty data")
    if method == "permutation":
        imp = permutation_importance(model, X, y, n_repeats, seed).mean(axis=1)
    elif method == "shapley_sampling":
        _, phi = shapley_values(model.raw_score, X, n_permutations, n_explain, n_background, seed)
        imp = np.abs(phi).mean(axis=0)
    else:
        raise ValueError(f"unknown importance method {method!r}; use 'permutation' or 'shapley_sampling'")
    signs = _signs(X, model.predict(X))
    order = np.lexsort((np.arange(len(imp)), -imp))
    return [(model.input_names[j], float(imp[j]), int(signs[j])) for j in order]
