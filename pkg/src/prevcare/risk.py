"""Onset-risk model: training on never-treated records, SMOTE, Platt scaling,
random hyperparameter search and the sparse feature views."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from scipy.stats import rankdata

from .cohort import Panel
from .learners import (ForestParams, GbdtParams, fit_gbdt, fit_linear, fit_random_forest,
                       logloss, model_from_dict, model_to_dict)
from .learners.serialize import register

LEARNERS = ("gbdt", "random_forest", "lasso", "ridge")
GLUCOSE = "fasting_glucose"

# columns derivable from the clinical score's chart
FRAMINGHAM_FEATURES = (GLUCOSE, "bmi", "hdl", "sex", "parental_history", "triglycerides",
                       "systolic_bp", "diastolic_bp", "bp_treatment")
FEATURE_VIEWS = ("full", "framingham_only", "framingham_plus_age_hba1c")
DEFAULT_LINEAR_ALPHA = {"lasso": 1e-3, "ridge": 1e-2}


def view_columns(feature_names, view: str) -> list:
    """Column names used by ``view``; the panel matrix is the features plus glucose."""
    names = list(feature_names) + [GLUCOSE]
    if view == "full":
        return names
    if view == "framingham_only":
        cols = list(FRAMINGHAM_FEATURES)
    elif view == "framingham_plus_age_hba1c":
        cols = list(FRAMINGHAM_FEATURES) + ["age", "hba1c"]
    else:
        raise ValueError(f"unknown feature view {view!r}; expected one of {FEATURE_VIEWS}")
    missing = [c for c in cols if c not in names]
    if missing:
        raise ValueError(f"feature view {view!r} needs columns missing from the panel: {missing}")
    return cols


def panel_matrix(panel: Panel, rows=None, view: str = "full") -> np.ndarray:
    """Design matrix for ``rows`` of ``panel`` restricted to ``view``.

    Unobserved glucose (after a missed test) is filled with the panel median.
    """
    rows = np.arange(len(panel)) if rows is None else np.asarray(rows)
    gl = panel.fasting_glucose
    fill = np.nanmedian(gl) if np.any(~np.isnan(gl)) else 6.5
    g = gl[rows]
    g = np.where(np.isnan(g), fill, g)
    full = np.column_stack([panel.features[rows], g])
    names = list(panel.feature_names) + [GLUCOSE]
    idx = [names.index(c) for c in view_columns(panel.feature_names, view)]
    return np.ascontiguousarray(full[:, idx])


def roc_auc(y, score) -> float:
    y = np.asarray(y)
    pos = y == 1
    n1, n0 = pos.sum(), (~pos).sum()
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(score)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# --------------------------------------------------------------------------- SMOTE

def smote_oversample(X, y, k_neighbors: int = 5, target_ratio: float = 0.5, seed=None):
    """Append synthetic minority rows until minority/majority >= ``target_ratio``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("SMOTE needs two classes")
    minority = classes[np.argmin(counts)]
    n_min, n_maj = counts.min(), counts.max()
    n_new = max(0, math.ceil(target_ratio * n_maj - 1e-9) - n_min)
    if n_new == 0:
        return X.copy(), y.copy()
    if n_min < k_neighbors + 1:
        raise ValueError(f"SMOTE needs at least {k_neighbors + 1} minority samples, got {n_min}")
    rng = np.random.default_rng(seed)
    Xm = X[y == minority]
    _, nn = cKDTree(Xm).query(Xm, k=k_neighbors + 1)
    nn = nn[:, 1:].reshape(n_min, k_neighbors)
    base = rng.integers(0, n_min, size=n_new)
    neigh = nn[base, rng.integers(0, k_neighbors, size=n_new)]
    u = rng.random((n_new, 1))
    synth = Xm[base] + u * (Xm[neigh] - Xm[base])
    return np.vstack([X, synth]), np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])


# --------------------------------------------------------------------------- Platt scaling

@dataclass(frozen=True)
class PlattCalibrator:
    a: float
    b: float

    def __call__(self, s) -> np.ndarray:
        return expit(self.a * np.asarray(s, dtype=float) + self.b)


def fit_platt(raw_scores, labels, tol: float = 1e-8, max_iter: int = 200) -> PlattCalibrator:
    """Maximum-likelihood ``sigmoid(a * s + b)`` by damped Newton iterations."""
    s = np.asarray(raw_scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if len(np.unique(y)) < 2:
        raise ValueError("Platt scaling needs both classes in the labels")
    m = y.mean()
    a, b = 0.0, float(np.log(m / (1 - m)))

    def nll(a, b):
        f = a * s + b
        return float(np.mean(np.logaddexp(0.0, f) - y * f))

    cur = nll(a, b)
    for _ in range(max_iter):
        p = expit(a * s + b)
        r = p - y
        g = np.array([np.mean(r * s), np.mean(r)])
        if np.sqrt(g @ g) < tol:
            break
        w = p * (1 - p)
        H = np.array([[np.mean(w * s * s), np.mean(w * s)], [np.mean(w * s), np.mean(w)]])
        step = -np.linalg.solve(H + 1e-12 * np.eye(2), g)
        t = 1.0
        while t > 1e-10:
            new = nll(a + t * step[0], b + t * step[1])
            if new <= cur + 1e-15:
                break
            t *= 0.5
        a, b, cur = a + t * step[0], b + t * step[1], new
    return PlattCalibrator(float(a), float(b))


# --------------------------------------------------------------------------- search

@dataclass
class SearchConfig:
    enabled: bool = True
    n_trials: int = 100
    n_folds: int = 10


def _loguniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_hyperparameters(learner: str, rng: np.random.Generator) -> dict:
    if learner == "gbdt":
        return {
            "n_trees": int(rng.integers(20, 201)),
            "n_leaves": int(rng.integers(20, 151)),
            "learning_rate": _loguniform(rng, 0.01, 0.5),
            "bin_sample_cap": int(rng.integers(20_000, 300_001)),
            "min_child_samples": int(rng.integers(20, 501)),
            "reg_l1": float(rng.uniform(0, 1)),
            "reg_l2": float(rng.uniform(0, 1)),
            "class_weight": [None, "balanced"][int(rng.integers(2))],
        }
    if learner == "random_forest":
        return {
            "n_trees": int(rng.integers(20, 201)),
            "min_samples_split": int(rng.integers(2, 151)),
            "max_features": ["sqrt", "log2", "all"][int(rng.integers(3))],
            "criterion": ["gini", "entropy"][int(rng.integers(2))],
            "class_weight": [None, "balanced"][int(rng.integers(2))],
        }
    if learner in ("lasso", "ridge"):
        return {"alpha": _loguniform(rng, 1e-3, 1e4)}
    raise ValueError(f"unknown learner {learner!r}; expected one of {LEARNERS}")


def default_hyperparameters(learner: str) -> dict:
    if learner == "gbdt":
        return {"n_trees": 100, "n_leaves": 31, "learning_rate": 0.1, "min_child_samples": 20,
                "reg_l1": 0.0, "reg_l2": 0.0, "class_weight": "balanced"}
    if learner == "random_forest":
        return asdict(ForestParams())
    if learner in ("lasso", "ridge"):
        return {"alpha": DEFAULT_LINEAR_ALPHA[learner]}
    raise ValueError(f"unknown learner {learner!r}; expected one of {LEARNERS}")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, X) -> np.ndarray:
        return (X - self.mean) / self.scale


def fit_learner(learner: str, X, y, hp: dict, seed):
    """Fit one base learner; linear learners see standardized inputs."""
    if learner == "gbdt":
        return fit_gbdt(X, y, GbdtParams(**hp), seed=seed), None
    if learner == "random_forest":
        return fit_random_forest(X, y, ForestParams(**hp), seed=seed), None
    if learner in ("lasso", "ridge"):
        std = Standardizer.fit(X)
        penalty = "l1" if learner == "lasso" else "l2"
        return fit_linear(std(X), y, penalty=penalty, alpha=hp["alpha"]), std
    raise ValueError(f"unknown learner {learner!r}; expected one of {LEARNERS}")


def _raw(model, std, X):
    return model.raw_score(std(X) if std is not None else X)


def stratified_folds(y, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    fold = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        fold[rng.permutation(idx)] = np.arange(len(idx)) % n_folds
    return fold


@dataclass
class SmoteConfig:
    enabled: bool = True
    k_neighbors: int = 5
    target_ratio: float = 0.5


def _augment(X, y, smote: SmoteConfig, seed):
    if not smote.enabled:
        return X, y
    n_min = int(min(np.sum(y == 0), np.sum(y == 1)))
    k = min(smote.k_neighbors, n_min - 1)
    if k < 1:
        warnings.warn("too few minority samples for SMOTE; training without it", stacklevel=3)
        return X, y
    return smote_oversample(X, y, k, smote.target_ratio, seed)


def cross_validated_scores(learner, X, y, hp, n_folds, smote, seed):
    """Out-of-fold raw scores, SMOTE applied inside each training fold only."""
    rng = np.random.default_rng(seed)
    fold = stratified_folds(y, n_folds, rng)
    seeds = rng.integers(0, 2**63, size=n_folds)
    oof = np.empty(len(y))
    for f in range(n_folds):
        tr = fold != f
        Xa, ya = _augment(X[tr], y[tr], smote, int(seeds[f]))
        model, std = fit_learner(learner, Xa, ya, hp, int(seeds[f]))
        oof[~tr] = _raw(model, std, X[~tr])
    return oof, fold


# --------------------------------------------------------------------------- model

@dataclass
class RiskModel:
    learner: str
    model: object
    calibrator: PlattCalibrator
    feature_view: str
    input_names: tuple
    standardizer: Standardizer | None = None
    hyperparameters: dict = field(default_factory=dict)
    search_log: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    train_rows: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.input_names)

    def raw_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _raw(self.model, self.standardizer, X)

    def predict(self, X) -> np.ndarray:
        return self.calibrator(self.raw_score(X))

    def to_dict(self) -> dict:
        return {
            "kind": "risk_model",
            "learner": self.learner,
            "model": model_to_dict(self.model),
            "calibrator": {"a": self.calibrator.a, "b": self.calibrator.b},
            "feature_view": self.feature_view,
            "input_names": list(self.input_names),
            "standardizer": None if self.standardizer is None else {
                "mean": self.standardizer.mean.tolist(), "scale": self.standardizer.scale.tolist()},
            "hyperparameters": self.hyperparameters,
            "search_log": self.search_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RiskModel":
        std = d.get("standardizer")
        return cls(d["learner"], model_from_dict(d["model"]), PlattCalibrator(**d["calibrator"]),
                   d["feature_view"], tuple(d["input_names"]),
                   None if std is None else Standardizer(np.asarray(std["mean"]), np.asarray(std["scale"])),
                   d.get("hyperparameters", {}), d.get("search_log", []))


register("risk_model", RiskModel)


def predict_risk(model: RiskModel, x):
    """Calibrated untreated onset probability: float for a vector, array for a matrix."""
    x = np.asarray(x, dtype=float)
    p = model.predict(x)
    return float(p[0]) if x.ndim == 1 else p


def training_rows(panel: Panel, before_year: int | None = None) -> np.ndarray:
    """Labelled records of patients never treated up to the training cutoff."""
    in_window = np.ones(len(panel), bool) if before_year is None else panel.year < before_year
    treated_patients = set(panel.patient_id[in_window & (panel.treated == 1)])
    never = ~np.isin(panel.patient_id, list(treated_patients)) if treated_patients else np.ones(len(panel), bool)
    return np.flatnonzero(in_window & never & panel.labeled() & (panel.treated == 0))


def train_risk_model(panel: Panel, learner: str = "gbdt", search: SearchConfig | None = None,
                     seed=0, *, feature_view: str = "full", before_year: int | None = None,
                     hyperparameters: dict | None = None, smote: SmoteConfig | None = None,
                     calibration_folds: int = 5) -> RiskModel:
    """Fit the risk model on never-treated labelled records (optionally only
    those before ``before_year``) and calibrate it on out-of-fold scores."""
    if learner not in LEARNERS:
        raise ValueError(f"unknown learner {learner!r}; expected one of {LEARNERS}")
    search = search or SearchConfig(enabled=False)
    smote = smote or SmoteConfig()
    rows = training_rows(panel, before_year)
    if len(rows) == 0:
        raise ValueError("no labelled records of untreated patients to train on")
    assert not panel.treated[rows].any(), "risk model training touched treated records"
    X = panel_matrix(panel, rows, feature_view)
    y = panel.onset_next[rows].astype(int)
    if len(np.unique(y)) < 2:
        raise ValueError("risk model needs untreated records of both outcome classes")
    ss = np.random.SeedSequence(seed)
    search_seed, cv_seed, fit_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(3))

    search_log = []
    if search.enabled:
        rng = np.random.default_rng(search_seed)
        best, best_loss = None, np.inf
        for trial in range(search.n_trials):
            hp = sample_hyperparameters(learner, rng)
            oof, _ = cross_validated_scores(learner, X, y, hp, search.n_folds, smote,
                                            int(rng.integers(2**63)))
            loss = logloss(y, expit(oof))
            search_log.append({"trial": trial, "hyperparameters": hp, "cv_logloss": loss})
            if loss < best_loss:
                best, best_loss = hp, loss
        hp = best
    else:
        hp = dict(default_hyperparameters(learner))
        hp.update(hyperparameters or {})

    n_folds = search.n_folds if search.enabled else calibration_folds
    oof, fold = cross_validated_scores(learner, X, y, hp, n_folds, smote, cv_seed)
    calibrator = fit_platt(oof, y)
    # cross-fitted calibration: each fold's calibrator never sees that fold
    brier_raw, brier_cal = [], []
    for f in range(n_folds):
        va = fold == f
        if len(np.unique(y[~va])) < 2:
            continue
        cal = fit_platt(oof[~va], y[~va])
        brier_raw.append(float(np.mean((expit(oof[va]) - y[va]) ** 2)))
        brier_cal.append(float(np.mean((cal(oof[va]) - y[va]) ** 2)))

    Xa, ya = _augment(X, y, smote, fit_seed)
    model, std = fit_learner(learner, Xa, ya, hp, fit_seed)
    diagnostics = {
        "n_train": int(len(rows)),
        "positive_rate": float(y.mean()),
        "brier_uncalibrated_folds": brier_raw,
        "brier_calibrated_folds": brier_cal,
        "max_train_year": int(panel.year[rows].max()),
    }
    return RiskModel(learner, model, calibrator, feature_view,
                     tuple(view_columns(panel.feature_names, feature_view)), std, hp,
                     search_log, diagnostics, rows)


def fit_risk_arrays(X, y, learner: str = "gbdt", seed=0, *, hyperparameters: dict | None = None,
                    smote: SmoteConfig | None = None, calibration_folds: int = 5,
                    input_names=None) -> RiskModel:
    """Risk model from a plain design matrix (no panel, no search)."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    smote = smote or SmoteConfig()
    hp = dict(default_hyperparameters(learner))
    hp.update(hyperparameters or {})
    ss = np.random.SeedSequence(seed)
    cv_seed, fit_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(2))
    oof, _ = cross_validated_scores(learner, X, y, hp, calibration_folds, smote, cv_seed)
    calibrator = fit_platt(oof, y)
    Xa, ya = _augment(X, y, smote, fit_seed)
    model, std = fit_learner(learner, Xa, ya, hp, fit_seed)
    names = tuple(input_names) if input_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    return RiskModel(learner, model, calibrator, "full", names, std, hp)


def calibration_table(p, y, n_bins: int = 10) -> list:
    """(mean predicted, observed rate, count) per non-empty equal-width bin."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    b = np.minimum((p * n_bins).astype(int), n_bins - 1)
    out = []
    for k in range(n_bins):
        m = b == k
        if m.any():
            out.append((float(p[m].mean()), float(y[m].mean()), int(m.sum())))
    return out


def calibration_curve(model: RiskModel, data, n_bins: int = 10) -> list:
    """``data`` is ``(X, y)``."""
    X, y = data
    return calibration_table(model.predict(X), y, n_bins)
