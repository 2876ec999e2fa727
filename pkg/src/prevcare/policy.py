"""Per-year allocation rules under a budget of k new enrolments.

Every selector takes mappings keyed by patient id and returns the set of
selected ids.  Ties are broken by a seeded random key, never by id order.
"""
from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MGDL_PER_MMOL = 18.0


@dataclass(frozen=True)
class FraminghamInputs:
    fasting_glucose_mgdl: float
    bmi: float
    hdl_mgdl: float
    sex: str  # "male" or "female"
    parental_history: bool
    triglycerides_mgdl: float
    systolic: float
    diastolic: float
    on_bp_treatment: bool

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise ValueError(f"sex must be 'male' or 'female', got {self.sex!r}")
        for name in ("fasting_glucose_mgdl", "bmi", "hdl_mgdl", "triglycerides_mgdl",
                     "systolic", "diastolic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def framingham_score(inp: FraminghamInputs) -> int:
    score = 0
    if 100 <= inp.fasting_glucose_mgdl < 126:
        score += 10
    if inp.bmi >= 30.0:
        score += 5
    elif inp.bmi >= 25.0:
        score += 2
    if inp.hdl_mgdl < (40 if inp.sex == "male" else 50):
        score += 5
    if inp.parental_history:
        score += 3
    if inp.triglycerides_mgdl >= 150:
        score += 3
    if inp.systolic >= 130 or inp.diastolic >= 85 or inp.on_bp_treatment:
        score += 2
    return score


def framingham_scores(glucose_mmol, bmi, hdl, female, parental, trig, sbp, dbp, bp_tx) -> np.ndarray:
    """Vectorized score; glucose in mmol/L, ``female`` as 0/1."""
    g = np.asarray(glucose_mmol, float) * MGDL_PER_MMOL
    bmi = np.asarray(bmi, float)
    s = 10 * ((g >= 100) & (g < 126))
    s = s + np.where(bmi >= 30.0, 5, np.where(bmi >= 25.0, 2, 0))
    s = s + 5 * (np.asarray(hdl, float) < np.where(np.asarray(female) > 0.5, 50, 40))
    s = s + 3 * (np.asarray(parental, float) > 0.5)
    s = s + 3 * (np.asarray(trig, float) >= 150)
    s = s + 2 * ((np.asarray(sbp, float) >= 130) | (np.asarray(dbp, float) >= 85)
                 | (np.asarray(bp_tx, float) > 0.5))
    return s.astype(int)


def _ids_and_values(d: dict):
    ids = list(d.keys())
    return ids, np.asarray([d[i] for i in ids], dtype=float)


def _top_by(ids, values, k: int, seed, warn: bool = False) -> set:
    if k < 0:
        raise ValueError("k must be >= 0")
    n = len(ids)
    if k > n and warn:
        warnings.warn(f"budget k={k} exceeds the {n} eligible patients; selecting all",
                      stacklevel=3)
    k = min(k, n)
    if k == 0:
        return set()
    # sort ids first so the tie-break key does not depend on dict order
    perm = sorted(range(n), key=lambda i: ids[i])
    ids = [ids[i] for i in perm]
    values = values[perm]
    tie = np.random.default_rng(seed).random(n)
    order = np.lexsort((tie, -values))
    return {ids[i] for i in order[:k]}


def threshold_policy(scores: dict, k: int, tie_break_seed=0) -> set:
    """Enrol the k highest scores: the cut-off is the k-th order statistic and
    patients tied at it are drawn at random."""
    ids, v = _ids_and_values(scores)
    return _top_by(ids, v, k, tie_break_seed, warn=True)


def select_topk(risks: dict, gammas: dict, k: int, tie_break_seed=0) -> set:
    """The k patients with the largest expected risk reduction ``gamma * h``."""
    if set(risks) != set(gammas):
        raise ValueError("risks and gammas must have the same patient ids")
    ids = list(risks)
    red = np.asarray([gammas[i] * risks[i] for i in ids], dtype=float)
    return _top_by(ids, red, k, tie_break_seed)


def risk_only_policy(risks: dict, k: int, seed=0) -> set:
    ids, v = _ids_and_values(risks)
    return _top_by(ids, v, k, seed)


def random_policy(eligible, k: int, seed=0) -> set:
    ids = sorted(eligible)
    k = min(max(k, 0), len(ids))
    if k == 0:
        return set()
    pick = np.random.default_rng(seed).choice(len(ids), size=k, replace=False)
    return {ids[i] for i in pick}


def expected_onsets(risks: dict, gammas: dict, chosen) -> float:
    """Single-year allocation objective: sum of (1 - gamma) h over treated plus h over the rest."""
    return float(sum((1 - gammas[i]) * risks[i] if i in chosen else risks[i] for i in risks))


def brute_force_allocation(risks: dict, gammas: dict, k: int):
    """Exhaustive minimiser of the expected-onset objective over all sets of size <= k."""
    if len(risks) > 20:
        raise ValueError("brute-force allocation is limited to 20 patients")
    ids = sorted(risks)
    best, best_obj = set(), expected_onsets(risks, gammas, set())
    for size in range(1, min(k, len(ids)) + 1):
        for combo in itertools.combinations(ids, size):
            obj = expected_onsets(risks, gammas, set(combo))
            if obj < best_obj - 1e-15:
                best, best_obj = set(combo), obj
    return best, best_obj


@dataclass
class AllocationPlan:
    budget_per_year: int
    assignments: dict = field(default_factory=dict)  # (patient_id, year) -> 0/1

    def add_year(self, year: int, eligible, chosen) -> None:
        chosen = set(chosen)
        if len(chosen) > self.budget_per_year:
            raise ValueError(f"year {year}: {len(chosen)} enrolments exceed budget {self.budget_per_year}")
        if not chosen <= set(eligible):
            raise ValueError(f"year {year}: selection contains ineligible patients")
        for p in eligible:
            self.assignments[(p, year)] = int(p in chosen)

    def enrolled(self, year: int) -> set:
        return {p for (p, y), t in self.assignments.items() if y == year and t}

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "year", "treated"])
            for (p, y) in sorted(self.assignments, key=lambda key: (key[1], key[0])):
                w.writerow([p, y, self.assignments[(p, y)]])
