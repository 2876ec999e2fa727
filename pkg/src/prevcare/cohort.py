"""Longitudinal patient panels: data model, synthetic generation, CSV I/O, labels.

A panel holds one row per (patient, year).  ``onset_next`` is the label for
the transition from year ``l`` to ``l + 1`` and is NaN when the follow-up was
missed.  Fasting glucose is in mmol/L.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

PREDIABETES_LOW = 6.1
ONSET_GLUCOSE = 6.9
BASE_COLUMNS = ("patient_id", "year", "treated", "died", "onset_next", "fasting_glucose")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    year: int
    features: np.ndarray
    treated: int
    onset_next: int | None
    died: int
    fasting_glucose: float


class Panel:
    """Columnar, read-only collection of patient-year records.

    Optional ``true_gamma`` / ``true_risk`` carry the generating process's
    per-record treatment effect and untreated onset probability; they exist
    only for synthetic panels and are never written to CSV.
    """

    def __init__(self, patient_id, year, treated, died, onset_next, fasting_glucose,
                 features, feature_names=None, true_gamma=None, true_risk=None):
        self.patient_id = np.asarray(patient_id, dtype=str)
        n = len(self.patient_id)
        self.year = np.asarray(year, dtype=np.int64).reshape(n)
        self.treated = np.asarray(treated, dtype=np.int64).reshape(n)
        self.died = np.asarray(died, dtype=np.int64).reshape(n)
        self.onset_next = np.asarray(onset_next, dtype=np.float64).reshape(n)
        self.fasting_glucose = np.asarray(fasting_glucose, dtype=np.float64).reshape(n)
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            if n == 0 and feature_names is not None:
                feats = feats.reshape(0, len(feature_names))
            else:
                raise ValueError("features must be a 2-D array with one row per record")
        self.features = feats
        d = feats.shape[1]
        self.feature_names = tuple(feature_names) if feature_names is not None else tuple(
            f"f{j}" for j in range(d))
        if len(self.feature_names) != d:
            raise ValueError("feature_names length does not match feature dimension")
        self.true_gamma = None if true_gamma is None else np.asarray(true_gamma, float).reshape(n)
        self.true_risk = None if true_risk is None else np.asarray(true_risk, float).reshape(n)
        self._validate()
        for arr in (self.patient_id, self.year, self.treated, self.died, self.onset_next,
                    self.fasting_glucose, self.features, self.true_gamma, self.true_risk):
            if arr is not None:
                arr.flags.writeable = False

    def _validate(self):
        if np.any(self.year < 1):
            raise ValueError("year must be >= 1")
        for name in ("treated", "died"):
            if not np.isin(getattr(self, name), (0, 1)).all():
                raise ValueError(f"{name} must be 0 or 1")
        lab = self.onset_next[~np.isnan(self.onset_next)]
        if not np.isin(lab, (0.0, 1.0)).all():
            raise ValueError("onset_next must be 0, 1 or absent")
        if len(self):
            keys = np.rec.fromarrays([self.patient_id, self.year])
            uniq, counts = np.unique(keys, return_counts=True)
            if np.any(counts > 1):
                pid, yr = uniq[np.argmax(counts > 1)]
                raise ValueError(f"duplicate record for patient {pid!r}, year {yr}")
            dead = self.died == 1
            if dead.any():
                death_year = {}
                for pid, yr in zip(self.patient_id[dead], self.year[dead]):
                    death_year[pid] = min(yr, death_year.get(pid, yr))
                last = self.last_year_by_patient()
                for pid, yr in death_year.items():
                    if last[pid] > yr:
                        raise ValueError(f"patient {pid!r} has records after death in year {yr}")

    def __len__(self) -> int:
        return len(self.patient_id)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def horizon(self) -> int:
        return int(self.year.max()) if len(self) else 0

    @property
    def patients(self) -> np.ndarray:
        return np.unique(self.patient_id)

    @property
    def treated_count(self) -> int:
        return len(np.unique(self.patient_id[self.treated == 1]))

    def labeled(self) -> np.ndarray:
        return ~np.isnan(self.onset_next)

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"panel has no feature named {name!r}") from None

    def last_year_by_patient(self) -> dict:
        out: dict = {}
        for pid, yr in zip(self.patient_id, self.year):
            if yr > out.get(pid, 0):
                out[pid] = yr
        return out

    def subset(self, mask) -> "Panel":
        mask = np.asarray(mask)
        return Panel(self.patient_id[mask], self.year[mask], self.treated[mask], self.died[mask],
                     self.onset_next[mask], self.fasting_glucose[mask], self.features[mask],
                     self.feature_names,
                     None if self.true_gamma is None else self.true_gamma[mask],
                     None if self.true_risk is None else self.true_risk[mask])

    def replace(self, **changes) -> "Panel":
        cols = dict(patient_id=self.patient_id, year=self.year, treated=self.treated,
                    died=self.died, onset_next=self.onset_next,
                    fasting_glucose=self.fasting_glucose, features=self.features,
                    feature_names=self.feature_names, true_gamma=self.true_gamma,
                    true_risk=self.true_risk)
        cols.update(changes)
        return Panel(**cols)

    def records(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            lab = self.onset_next[i]
            yield PatientRecord(str(self.patient_id[i]), int(self.year[i]), self.features[i],
                                int(self.treated[i]), None if np.isnan(lab) else int(lab),
                                int(self.died[i]), float(self.fasting_glucose[i]))

    def equals(self, other: "Panel") -> bool:
        return (self.feature_names == other.feature_names
                and all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=c != "patient_id")
                        for c in BASE_COLUMNS + ("features",)))


# --------------------------------------------------------------------------- generation

@dataclass
class GenConfig:
    """Synthetic cohort parameters.

    Latent risk is ``sigmoid((w . x + sum_ij v_ij c_i c_j) / risk_scale + risk_offset)``
    with ``c = x - feature_mean``;
    a record's onset label is ``1[latent + eps >= onset_threshold]`` with
    ``eps ~ N(0, noise_sd^2)``.  Treatment is assigned per patient in year 1 and
    kept for life; a treated onset is averted with probability gamma where
    ``gamma = clip(true_effect + effect_weights . (x - feature_mean), 0, 1)``.
    """

    n_patients: int = 100_000
    horizon: int = 1
    feature_mean: list = field(default_factory=lambda: [50.0, 170.0, 27.0])
    feature_cov: list = field(default_factory=lambda: [[20.0, 0.0, 5.0], [0.0, 50.0, 5.0],
                                                       [5.0, 5.0, 5.0]])
    risk_weights: list = field(default_factory=lambda: [0.5, 0.1, 0.2])
    risk_scale: float = 100.0
    onset_threshold: float = 0.7
    noise_sd: float = 1.0
    true_effect: float = 0.31
    treated_fraction: float = 0.0
    confounding_strength: float = 0.0
    seed: int = 0
    feature_names: list | None = None
    binary_thresholds: dict = field(default_factory=dict)
    risk_offset: float = 0.0
    risk_interactions: list = field(default_factory=list)
    effect_weights: list | None = None
    yearly_drift: list | None = None
    extra_features: dict = field(default_factory=dict)
    death_rate: float = 0.0
    missed_followup_rate: float = 0.0

    def validate(self) -> None:
        mu = np.asarray(self.feature_mean, dtype=float)
        cov = np.asarray(self.feature_cov, dtype=float)
        d = len(mu)
        if mu.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"feature_cov must be {d}x{d} to match feature_mean, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("feature_cov is not symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig.min() < -1e-9 * max(1.0, abs(eig).max()):
            raise ValueError(f"feature_cov is not positive semidefinite (min eigenvalue {eig.min():.3g})")
        for name in ("risk_weights", "effect_weights", "yearly_drift"):
            v = getattr(self, name)
            if v is not None and len(v) != d:
                raise ValueError(f"{name} has length {len(v)}, expected {d}")
        if self.feature_names is not None and len(self.feature_names) != d:
            raise ValueError(f"feature_names has length {len(self.feature_names)}, expected {d}")
        names = self._names()
        for key in self.binary_thresholds:
            if key not in names:
                raise ValueError(f"binary_thresholds refers to unknown feature {key!r}")
        for i, j, _ in self.risk_interactions:
            if not (0 <= int(i) < d and 0 <= int(j) < d):
                raise ValueError(f"risk interaction ({i}, {j}) out of range")
        if not 0.0 < self.onset_threshold < 1.0:
            raise ValueError("onset_threshold must lie in (0, 1)")
        if not 0.0 <= self.true_effect <= 1.0:
            raise ValueError("true_effect must lie in [0, 1]")
        if not 0.0 <= self.treated_fraction <= 1.0:
            raise ValueError("treated_fraction must lie in [0, 1]")
        for name in ("death_rate", "missed_followup_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_sd < 0 or self.risk_scale <= 0:
            raise ValueError("noise_sd must be >= 0 and risk_scale > 0")
        if self.n_patients < 0 or self.horizon < 1:
            raise ValueError("n_patients must be >= 0 and horizon >= 1")
        unknown = set(self.extra_features) - {"lab", "disease", "drug"}
        if unknown:
            raise ValueError(f"unknown extra feature groups {sorted(unknown)}")

    def _names(self) -> list:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"x{j}" for j in range(len(self.feature_mean))]

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def onset_probability(latent, threshold: float, noise_sd: float) -> np.ndarray:
    """P(latent + eps >= threshold) for eps ~ N(0, noise_sd^2)."""
    latent = np.asarray(latent, dtype=float)
    if noise_sd == 0:
        return (latent >= threshold).astype(float)
    return norm.sf((threshold - latent) / noise_sd)


def _latent(cfg: GenConfig, X: np.ndarray) -> np.ndarray:
    score = X @ np.asarray(cfg.risk_weights, dtype=float)
    mu = np.asarray(cfg.feature_mean, dtype=float)
    for i, j, w in cfg.risk_interactions:
        i, j = int(i), int(j)
        score = score + w * (X[:, i] - mu[i]) * (X[:, j] - mu[j])
    return expit(score / cfg.risk_scale + cfg.risk_offset)


def _gamma(cfg: GenConfig, X: np.ndarray) -> np.ndarray:
    if cfg.effect_weights is None:
        return np.full(X.shape[0], cfg.true_effect)
    centred = X - np.asarray(cfg.feature_mean, dtype=float)
    return np.clip(cfg.true_effect + centred @ np.asarray(cfg.effect_weights, dtype=float), 0.0, 1.0)


def _binarize(cfg: GenConfig, X: np.ndarray) -> np.ndarray:
    if not cfg.binary_thresholds:
        return X
    X = X.copy()
    names = cfg._names()
    for key, thr in cfg.binary_thresholds.items():
        j = names.index(key)
        X[:, j] = (X[:, j] > thr).astype(float)
    return X


def assignment_intercept(latent: np.ndarray, treated_fraction: float, strength: float) -> float:
    """Intercept ``a`` with mean(sigmoid(a + strength * latent)) == treated_fraction."""
    if strength == 0:
        p = min(max(treated_fraction, 1e-300), 1 - 1e-16)
        return float(np.log(p) - np.log1p(-p))
    f = lambda a: expit(a + strength * latent).mean() - treated_fraction  # noqa: E731
    lo, hi = -50.0 - abs(strength), 50.0 + abs(strength)
    return float(brentq(f, lo, hi, xtol=1e-12))


def _extra_block(rng, n: int, extra: dict):
    cols, names = [], []
    for group, prefix, draw in (("lab", "lab", lambda m: rng.standard_normal((n, m))),
                                ("disease", "dx", lambda m: (rng.random((n, m)) < 0.05).astype(float)),
                                ("drug", "rx", lambda m: (rng.random((n, m)) < 0.10).astype(float))):
        m = int(extra.get(group, 0))
        if m:
            cols.append(draw(m))
            names += [f"{prefix}_{j:03d}" for j in range(m)]
    if not cols:
        return np.zeros((n, 0)), names
    return np.hstack(cols), names


def generate_synthetic_cohort(config: GenConfig) -> Panel:
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, L = cfg.n_patients, cfg.horizon
    mu = np.asarray(cfg.feature_mean, dtype=float)
    cov = np.asarray(cfg.feature_cov, dtype=float)
    base = rng.multivariate_normal(mu, cov, size=n, method="eigh") if n else np.zeros((0, len(mu)))
    extra, extra_names = _extra_block(rng, n, cfg.extra_features)
    drift = np.zeros(len(mu)) if cfg.yearly_drift is None else np.asarray(cfg.yearly_drift, float)

    x1 = _binarize(cfg, base)
    lat1 = _latent(cfg, x1)
    if cfg.treated_fraction in (0.0, 1.0):
        treated = np.full(n, int(cfg.treated_fraction))
        rng.random(n)
    else:
        a = assignment_intercept(lat1, cfg.treated_fraction, cfg.confounding_strength)
        treated = (rng.random(n) < expit(a + cfg.confounding_strength * lat1)).astype(int)

    width = max(6, len(str(n)))
    ids = np.array([f"p{i:0{width}d}" for i in range(1, n + 1)], dtype=str)
    active = np.ones(n, dtype=bool)
    glucose_missing = np.zeros(n, dtype=bool)
    rows = []
    for year in range(1, L + 1):
        X = _binarize(cfg, base + (year - 1) * drift)
        latent = _latent(cfg, X)
        p_onset = onset_probability(latent, cfg.onset_threshold, cfg.noise_sd)
        gamma = _gamma(cfg, X)
        # fixed-size draws every year keep the random streams aligned across configs
        eps = rng.standard_normal(n) * cfg.noise_sd
        u_avert = rng.random(n)
        u_death = rng.random(n)
        u_missed = rng.random(n)
        u_gluc = rng.random(n)
        onset = (latent + eps >= cfg.onset_threshold).astype(int)
        onset[(treated == 1) & (u_avert < gamma)] = 0
        died = (u_death < cfg.death_rate).astype(int)
        missed = (u_missed < cfg.missed_followup_rate) & (died == 0)
        label = onset.astype(float)
        label[(died == 1) | missed] = np.nan
        glucose = PREDIABETES_LOW + (ONSET_GLUCOSE - PREDIABETES_LOW) * (0.5 * latent + 0.5 * u_gluc)
        glucose = np.where(glucose_missing, np.nan, np.round(glucose, 2))
        idx = np.flatnonzero(active)
        rows.append((idx, year, treated[idx], died[idx], label[idx], glucose[idx],
                     np.hstack([X[idx], extra[idx]]), gamma[idx], p_onset[idx]))
        # onset and death end follow-up; a missed test leaves next year's glucose unknown
        active &= ~((onset == 1) | (died == 1))
        glucose_missing = missed

    idx = np.concatenate([r[0] for r in rows])
    yr = np.concatenate([np.full(len(r[0]), r[1]) for r in rows])
    order = np.lexsort((yr, idx))
    cat = lambda k: np.concatenate([r[k] for r in rows])[order]  # noqa: E731
    feats = np.vstack([r[6] for r in rows])[order] if rows else np.zeros((0, len(mu)))
    return Panel(ids[idx[order]], yr[order], cat(2), cat(3), cat(4), cat(5), feats,
                 cfg._names() + extra_names, true_gamma=cat(7), true_risk=cat(8))


def table1_config(n_patients: int = 10_000, horizon: int = 5, seed: int = 0) -> GenConfig:
    """High-dimensional layout with the group sizes of the source cohort table:
    2 socio-demographic, 5 body, 100 lab, 100 disease-code and 100 drug columns."""
    core = [  # name, mean, sd
        ("age", 55.0, 10.0), ("sex", 0.0, 1.0),
        ("height", 168.0, 9.0), ("weight", 82.0, 15.0), ("bmi", 29.0, 5.0),
        ("systolic_bp", 130.0, 15.0), ("diastolic_bp", 80.0, 10.0),
        ("hdl", 48.0, 12.0), ("triglycerides", 150.0, 60.0), ("hba1c", 5.9, 0.3),
        ("parental_history", 0.0, 1.0), ("dx_acute_mi", 0.0, 1.0),
        ("dx_intracerebral_hemorrhage", 0.0, 1.0), ("dx_hypothyroidism", 0.0, 1.0),
        ("dx_angina", 0.0, 1.0), ("dx_heart_failure", 0.0, 1.0), ("bp_treatment", 0.0, 1.0),
    ]
    names = [c[0] for c in core]
    sd = np.array([c[2] for c in core])
    corr = np.eye(len(core))
    corr[3, 4] = corr[4, 3] = 0.8
    corr[2, 3] = corr[3, 2] = 0.4
    corr[5, 6] = corr[6, 5] = 0.6
    w = np.zeros(len(core))
    w[names.index("age")] = 0.03
    w[names.index("bmi")] = 0.08
    w[names.index("hba1c")] = 1.5
    w[names.index("hdl")] = -0.02
    w[names.index("triglycerides")] = 0.004
    w[names.index("parental_history")] = 0.5
    latent_mean = float(w @ np.array([c[1] for c in core]))
    binary = {"sex": 0.0, "parental_history": 0.5, "dx_acute_mi": 1.64,
              "dx_intracerebral_hemorrhage": 2.0, "dx_hypothyroidism": 1.3,
              "dx_angina": 1.64, "dx_heart_failure": 1.88, "bp_treatment": 0.5}
    # 17 named columns: 2 demographic, 5 body, 4 lab, 6 disease/drug indicators
    return GenConfig(
        n_patients=n_patients, horizon=horizon,
        feature_mean=[c[1] for c in core], feature_cov=(np.outer(sd, sd) * corr).tolist(),
        risk_weights=w.tolist(), risk_scale=1.0, risk_offset=-latent_mean - 0.3,
        onset_threshold=0.6, noise_sd=0.2, true_effect=0.3, treated_fraction=0.3,
        seed=seed, feature_names=names, binary_thresholds=binary,
        yearly_drift=[1.0] + [0.0] * (len(core) - 1),
        extra_features={"lab": 96, "disease": 95, "drug": 99},
        death_rate=0.01, missed_followup_rate=0.05)


# --------------------------------------------------------------------------- CSV I/O

def _fmt(v: float) -> str:
    return "" if np.isnan(v) else format(float(v), ".9g")


def schema_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".schema.json")


def write_panel(panel: Panel, path, write_schema: bool = True) -> None:
    path = Path(path)
    d = panel.n_features
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(BASE_COLUMNS) + [f"f{j}" for j in range(d)])
        for i in range(len(panel)):
            lab = panel.onset_next[i]
            w.writerow([panel.patient_id[i], int(panel.year[i]), int(panel.treated[i]),
                        int(panel.died[i]), "" if np.isnan(lab) else int(lab),
                        _fmt(panel.fasting_glucose[i])] + [_fmt(v) for v in panel.features[i]])
    if write_schema:
        schema_path(path).write_text(json.dumps({"feature_names": list(panel.feature_names)},
                                                indent=1) + "\n", encoding="utf-8")


def load_panel(path, schema: dict | None = None) -> Panel:
    """Read a panel CSV.

    ``schema`` may map canonical column names to the file's header names and
    give ``feature_names`` for the ``f*`` columns; by default the sidecar
    ``<file>.schema.json`` is used when present.
    """
    path = Path(path)
    if schema is None and schema_path(path).exists():
        schema = json.loads(schema_path(path).read_text(encoding="utf-8"))
    schema = dict(schema or {})
    names = schema.pop("feature_names", None)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        col = {}
        for c in BASE_COLUMNS:
            src = schema.get(c, c)
            if src not in header:
                raise ValueError(f"{path}: missing column {src!r}")
            col[c] = header.index(src)
        fcols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        fcols.sort(key=lambda i: int(header[i][1:]))
        if names is not None and len(names) != len(fcols):
            raise ValueError(f"{path}: schema lists {len(names)} features, file has {len(fcols)}")
        pid, year, treated, died, onset, gluc, feats = [], [], [], [], [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {rowno} has {len(row)} fields, expected {len(header)}")
            cur = None
            try:
                cur = "patient_id"
                pid.append(row[col[cur]])
                for cur, dest in (("year", year), ("treated", treated), ("died", died)):
                    dest.append(int(row[col[cur]]))
                cur = "onset_next"
                onset.append(float(row[col[cur]]) if row[col[cur]] != "" else np.nan)
                cur = "fasting_glucose"
                gluc.append(float(row[col[cur]]) if row[col[cur]] != "" else np.nan)
                vals = []
                for i in fcols:
                    cur = header[i]
                    vals.append(float(row[i]))
                feats.append(vals)
            except ValueError:
                raise ValueError(f"{path}: row {rowno}, column {cur!r}: cannot parse "
                                 f"{row[header.index(cur) if cur in header else col[cur]]!r}") from None
    features = np.asarray(feats, dtype=float).reshape(len(pid), len(fcols))
    return Panel(pid, year, treated, died, onset, gluc, features, names)


# --------------------------------------------------------------------------- labels and eligibility

def label_transition(panel: Panel) -> Panel:
    """Set each record's label from the next year's fasting glucose.

    Records whose next-year glucose is unobserved keep their current label
    (absent labels stay absent), so the operation is idempotent.
    """
    key = {(p, int(y)): i for i, (p, y) in enumerate(zip(panel.patient_id, panel.year))}
    onset = panel.onset_next.copy()
    for i, (p, y) in enumerate(zip(panel.patient_id, panel.year)):
        j = key.get((p, int(y) + 1))
        if j is None or np.isnan(panel.fasting_glucose[j]):
            continue
        onset[i] = float(panel.fasting_glucose[j] > ONSET_GLUCOSE)
    return panel.replace(onset_next=onset)


def eligible_patients(panel: Panel, year: int) -> set:
    """Patients alive and never treated as of ``year``.

    A patient qualifies if seen at or before ``year``, not dead in an earlier
    year, without a recorded treatment up to and including ``year``, and
    without an observed onset before ``year``.  Missed follow-ups do not
    disqualify.
    """
    if len(panel) == 0:
        return set()
    if not 1 <= year <= panel.horizon:
        raise ValueError(f"year {year} outside 1..{panel.horizon}")
    upto = panel.year <= year
    seen = set(panel.patient_id[upto])
    before = panel.year < year
    excluded = set(panel.patient_id[before & (panel.died == 1)])
    excluded |= set(panel.patient_id[upto & (panel.treated == 1)])
    excluded |= set(panel.patient_id[before & (panel.onset_next == 1)])
    return {str(p) for p in seen - excluded}


def latest_rows(panel: Panel, year: int, patient_ids) -> np.ndarray:
    """Row index of each patient's latest record at or before ``year``."""
    upto = np.flatnonzero(panel.year <= year)
    latest: dict = {}
    for i in upto:
        p = panel.patient_id[i]
        j = latest.get(p)
        if j is None or panel.year[i] > panel.year[j]:
            latest[p] = i
    try:
        return np.asarray([latest[p] for p in patient_ids], dtype=int)
    except KeyError as e:
        raise KeyError(f"patient {e.args[0]!r} has no record at or before year {year}") from None


def features_at(panel: Panel, year: int, patient_ids) -> np.ndarray:
    """Feature rows at ``year``, carried forward from the latest earlier record
    for patients without one that year."""
    return panel.features[latest_rows(panel, year, patient_ids)]


def summary(panel: Panel) -> dict:
    lab = panel.labeled()
    untreated = lab & (panel.treated == 0)
    if not len(panel):
        warnings.warn("empty panel", stacklevel=2)
    return {
        "n_records": len(panel),
        "n_patients": int(len(panel.patients)),
        "horizon": panel.horizon,
        "n_features": panel.n_features,
        "treated_fraction": float(panel.treated_count / max(len(panel.patients), 1)),
        "onset_rate": float(panel.onset_next[lab].mean()) if lab.any() else float("nan"),
        "onset_rate_untreated": float(panel.onset_next[untreated].mean()) if untreated.any() else float("nan"),
        "missed_followup_rate": float(np.mean(~lab & (panel.died == 0))) if len(panel) else float("nan"),
        "deaths": int(panel.died.sum()),
    }
