"""Per-patient costs, prevented onsets, cost savings and their bootstrap spread."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

COMORBIDITIES = ("acute_mi", "intracerebral_hemorrhage", "hypothyroidism", "angina",
                 "heart_failure")


@dataclass
class CostParams:
    c_prevent: float = 1380.0
    base_cost_cap: float = 15000.0
    comorbidity_costs: dict = field(default_factory=lambda: {
        "acute_mi": 5000.0, "intracerebral_hemorrhage": 5000.0, "hypothyroidism": 5000.0,
        "angina": 15000.0, "heart_failure": 15000.0})
    # panel feature holding each comorbidity indicator
    comorbidity_features: dict = field(default_factory=lambda: {c: f"dx_{c}" for c in COMORBIDITIES})
    life_expectancy: float = 75.0
    min_extra_years: float = 3.0
    max_extra_years: float = 10.0

    def __post_init__(self):
        if set(self.comorbidity_costs) != set(COMORBIDITIES):
            raise ValueError(f"comorbidity_costs must have exactly the keys {COMORBIDITIES}")
        vals = [self.c_prevent, self.base_cost_cap, self.life_expectancy,
                self.min_extra_years, self.max_extra_years, *self.comorbidity_costs.values()]
        if min(vals) < 0:
            raise ValueError("cost parameters must be non-negative")
        if self.min_extra_years > self.max_extra_years:
            raise ValueError("min_extra_years must not exceed max_extra_years")

    @property
    def comorbidity_vector(self) -> np.ndarray:
        return np.asarray([self.comorbidity_costs[c] for c in COMORBIDITIES], dtype=float)


def _check_age(age):
    a = np.asarray(age, dtype=float)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise ValueError("age must be a non-negative number")
    return a


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def base_cost(age, params: CostParams | None = None):
    params = params or CostParams()
    a = _check_age(age)
    return _out(params.base_cost_cap / (1.0 + np.exp(-a / 10.0)))


def diabetes_cost(age, comorbidity_flags, params: CostParams | None = None):
    """Base cost plus the cost of each flagged comorbidity; ``comorbidity_flags``
    has 5 entries (or rows of 5) in the order of ``COMORBIDITIES``."""
    params = params or CostParams()
    flags = np.asarray(comorbidity_flags, dtype=float)
    if flags.shape[-1] != len(COMORBIDITIES):
        raise ValueError(f"expected {len(COMORBIDITIES)} comorbidity flags")
    return _out(base_cost(age, params) + (flags > 0.5) @ params.comorbidity_vector)


def remaining_years(age, params: CostParams | None = None):
    params = params or CostParams()
    a = _check_age(age)
    return _out(np.clip(params.life_expectancy - a, params.min_extra_years, params.max_extra_years))


def expected_cost_treated(y, gamma, c_diab, params: CostParams | None = None):
    params = params or CostParams()
    if np.any(np.asarray(gamma) < 0) or np.any(np.asarray(gamma) > 1):
        raise ValueError("gamma must lie in [0, 1]")
    return _out(np.asarray(y) * (1 - np.asarray(gamma)) * np.asarray(c_diab) + params.c_prevent)


def expected_cost_untreated(y, c_diab):
    return _out(np.asarray(y) * np.asarray(c_diab))


@dataclass
class SimulationResult:
    """Per patient-year records of an evaluated allocation.

    ``averted`` is the onset mass removed by treatment: ``gamma * y`` in
    expected mode, a Bernoulli(gamma) draw times ``y`` in stochastic mode.
    Absent labels count as no onset.
    """

    patient_id: np.ndarray
    year: np.ndarray
    treated: np.ndarray
    newly_enrolled: np.ndarray
    onset_next: np.ndarray
    gamma: np.ndarray
    averted: np.ndarray
    age: np.ndarray
    comorbidity: np.ndarray
    n_years: int
    policy: str = ""
    budget_k: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.patient_id)

    def take(self, idx) -> "SimulationResult":
        idx = np.asarray(idx, dtype=int)
        return SimulationResult(self.patient_id[idx], self.year[idx], self.treated[idx],
                                self.newly_enrolled[idx], self.onset_next[idx], self.gamma[idx],
                                self.averted[idx], self.age[idx], self.comorbidity[idx],
                                self.n_years, self.policy, self.budget_k, self.meta)

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "year", "treated", "newly_enrolled", "onset_next", "gamma",
                        "averted", "age", *COMORBIDITIES])
            for i in range(len(self)):
                lab = self.onset_next[i]
                w.writerow([self.patient_id[i], int(self.year[i]), int(self.treated[i]),
                            int(self.newly_enrolled[i]), "" if np.isnan(lab) else int(lab),
                            format(self.gamma[i], ".9g"), format(self.averted[i], ".9g"),
                            format(self.age[i], ".9g"), *(int(v) for v in self.comorbidity[i])])


def prevented_onsets(result: SimulationResult) -> float:
    """Treated onset mass averted, averaged over the allocation years."""
    if result.n_years <= 0:
        raise ValueError("result covers no allocation years")
    return float(np.sum(result.treated * result.averted) / result.n_years)


def record_savings(treated, y, averted, c_diab, age, params: CostParams | None = None) -> np.ndarray:
    """Untreated cost minus allocation cost per record, onset costs extended
    over the clamped remaining lifetime.  Untreated records give 0."""
    params = params or CostParams()
    t = np.asarray(treated, dtype=float)
    y = np.nan_to_num(np.asarray(y, dtype=float), nan=0.0)
    c = np.asarray(c_diab, dtype=float) * remaining_years(np.asarray(age, dtype=float), params)
    cost_nt = expected_cost_untreated(y, c)
    # averted = gamma * y in expected mode, so y - averted = y * (1 - gamma)
    cost_t = (y - np.asarray(averted, dtype=float)) * c + params.c_prevent
    return np.where(t > 0, cost_nt - cost_t, 0.0)


def patient_savings(result: SimulationResult, params: CostParams | None = None) -> np.ndarray:
    params = params or CostParams()
    on = result.treated > 0
    out = np.zeros(len(result))
    if on.any():
        c = diabetes_cost(result.age[on], result.comorbidity[on], params)
        out[on] = record_savings(1, result.onset_next[on], result.averted[on], c,
                                 result.age[on], params)
    return out


def cost_savings(result: SimulationResult, params: CostParams | None = None) -> float:
    return float(np.sum(patient_savings(result, params)))


def bootstrap(metric, result: SimulationResult, B: int = 100, seed=0):
    """Mean and sd of ``metric`` over ``B`` resamples of patients with replacement."""
    if B < 2:
        raise ValueError("B must be >= 2")
    if len(result) == 0:
        raise ValueError("cannot bootstrap an empty result")
    codes, inverse = np.unique(result.patient_id, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(len(codes)))
    ends = np.append(starts[1:], len(order))
    rng = np.random.default_rng(seed)
    vals = np.empty(B)
    for b in range(B):
        draw = rng.integers(0, len(codes), size=len(codes))
        idx = np.concatenate([order[starts[p]:ends[p]] for p in draw])
        vals[b] = metric(result.take(idx))
    return float(vals.mean()), float(vals.std(ddof=1))


def summarize(result: SimulationResult, params: CostParams | None = None, B: int = 100,
              seed=0) -> dict:
    params = params or CostParams()
    po_mean, po_sd = bootstrap(prevented_onsets, result, B, seed)
    cs_mean, cs_sd = bootstrap(lambda r: cost_savings(r, params), result, B, seed)
    n_pat = len(np.unique(result.patient_id))
    cs = cost_savings(result, params)
    return {
        "policy": result.policy,
        "budget_k": int(result.budget_k),
        "n_years": int(result.n_years),
        "n_patients": int(n_pat),
        "enrolments": int(result.newly_enrolled.sum()),
        "prevented_onsets": prevented_onsets(result),
        "cost_savings": cs,
        "savings_per_patient_year": cs / max(n_pat, 1) / result.n_years,
        "bootstrap": {"B": B, "prevented_onsets_mean": po_mean, "prevented_onsets_sd": po_sd,
                      "cost_savings_mean": cs_mean, "cost_savings_sd": cs_sd},
    }


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def extrapolate_population(per_patient_annual_saving: float, population: int) -> float:
    if per_patient_annual_saving < 0 or population < 0:
        raise ValueError("inputs must be non-negative")
    return float(per_patient_annual_saving * population)


def cost_params_from_dict(d: dict) -> CostParams:
    unknown = set(d) - set(CostParams.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown cost parameter keys: {sorted(unknown)}")
    return CostParams(**d)


def cost_params_to_dict(p: CostParams) -> dict:
    return asdict(p)
