"""Multi-year evaluation of allocation policies on a panel.

For every allocation year the models are refit on records strictly before
that year, the policy enrols at most ``budget_k`` eligible patients, and the
outcomes of everyone on treatment are accounted.  Fitted models depend only
on (panel, year, model settings, seed), so a :class:`ModelCache` can share
them across policies, budgets and noise levels.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import econ
from .cohort import GenConfig, Panel, eligible_patients, generate_synthetic_cohort, latest_rows, load_panel
from .econ import COMORBIDITIES, CostParams, SimulationResult
from .effect import (CausalForestParams, EffectSpec, effect_at, effect_design, fit_causal_forest,
                     perturb_effects)
from .policy import (AllocationPlan, framingham_scores, random_policy, risk_only_policy,
                     select_topk, threshold_policy)
from .risk import SearchConfig, SmoteConfig, panel_matrix, train_risk_model, training_rows

POLICIES = ("ours", "clinical_framingham", "naive_random", "risk_only", "sparse_I", "sparse_II",
            "linear")
ABLATION_POLICIES = ("ours", "sparse_I", "sparse_II", "linear", "risk_only")
SWEEP_HEADER = ("k", "policy", "prevented_onsets", "prevented_sd", "cost_savings", "savings_sd")


class InsufficientDataError(ValueError):
    """Too little history before an allocation year to fit the models."""


@dataclass
class RiskSettings:
    learner: str = "gbdt"
    hyperparameters: dict = field(default_factory=dict)
    search: SearchConfig = field(default_factory=lambda: SearchConfig(enabled=False))
    smote: SmoteConfig = field(default_factory=SmoteConfig)
    calibration_folds: int = 5


@dataclass
class Seeds:
    data: int | None = None
    model: int = 0
    policy: int = 0
    bootstrap: int = 0


@dataclass
class ScenarioConfig:
    cohort: GenConfig | None = None
    panel_path: str | None = None
    policy: str = "ours"
    budget_k: int = 100
    years: list | None = None
    warmup_years: int = 1
    effect_spec: EffectSpec = field(default_factory=EffectSpec)
    effect_scale: str = "absolute"
    cost_params: CostParams = field(default_factory=CostParams)
    risk: RiskSettings = field(default_factory=RiskSettings)
    forest: CausalForestParams = field(default_factory=CausalForestParams)
    pooled_years: bool = True
    seeds: Seeds = field(default_factory=Seeds)
    retrain_each_year: bool = True
    outcome_mode: str = "expected"
    effect_noise_sd: float = 0.0
    bootstrap_samples: int = 100
    age_feature: str = "age"
    default_age: float | None = None

    def validate(self) -> None:
        if (self.cohort is None) == (self.panel_path is None):
            raise ValueError("exactly one of 'cohort' and 'panel_path' must be given")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.budget_k < 0:
            raise ValueError("budget_k must be >= 0")
        if self.warmup_years < 0:
            raise ValueError("warmup_years must be >= 0")
        if self.effect_scale not in ("absolute", "relative"):
            raise ValueError("effect_scale must be 'absolute' or 'relative'")
        if self.outcome_mode not in ("expected", "stochastic"):
            raise ValueError("outcome_mode must be 'expected' or 'stochastic'")
        if self.effect_noise_sd < 0:
            raise ValueError("effect_noise_sd must be >= 0")
        if self.bootstrap_samples < 2:
            raise ValueError("bootstrap_samples must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return _build(cls, d, "scenario")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ScenarioConfig":
        d = self.to_dict()
        d.update({k: asdict(v) if is_dataclass(v) else v for k, v in changes.items()})
        return ScenarioConfig.from_dict(d)


_NESTED = {
    ("scenario", "cohort"): GenConfig, ("scenario", "effect_spec"): EffectSpec,
    ("scenario", "cost_params"): CostParams, ("scenario", "risk"): RiskSettings,
    ("scenario", "forest"): CausalForestParams, ("scenario", "seeds"): Seeds,
    ("risk", "search"): SearchConfig, ("risk", "smote"): SmoteConfig,
}
_SCOPE = {ScenarioConfig: "scenario", RiskSettings: "risk"}


def _build(cls, d, where: str):
    """Strict dataclass construction from nested dicts; unknown keys are errors."""
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    scope = _SCOPE.get(cls)
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((scope, k)) if scope else None
        if sub is not None and v is not None:
            kwargs[k] = _build(sub, v, f"{where}.{k}") if sub in _SCOPE else _leaf(sub, v, f"{where}.{k}")
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValueError(f"{where}: {e}") from None


def _leaf(cls, v, where):
    if not isinstance(v, dict):
        raise ValueError(f"{where}: expected an object")
    unknown = sorted(set(v) - {f.name for f in fields(cls)})
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**v)
    except TypeError as e:
        raise ValueError(f"{where}: {e}") from None


# --------------------------------------------------------------------------- panel and model cache

def load_scenario_panel(config: ScenarioConfig) -> Panel:
    if config.cohort is not None:
        gen = config.cohort
        if config.seeds.data is not None:
            gen = GenConfig(**{**asdict(gen), "seed": config.seeds.data})
        return generate_synthetic_cohort(gen)
    return load_panel(config.panel_path)


def _key(obj) -> str:
    return json.dumps(asdict(obj) if is_dataclass(obj) else obj, sort_keys=True, default=str)


class ModelCache:
    """Fitted models keyed by everything that determines them."""

    def __init__(self):
        self._store: dict = {}
        self._panels: dict = {}

    def pin(self, panel: Panel) -> int:
        # keeps the panel alive so its id cannot be reused within this cache
        self._panels[id(panel)] = panel
        return id(panel)

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]


def _seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([int(base) & (2**63 - 1), *parts]).generate_state(1, np.uint64)[0])


def _policy_view(policy: str) -> str:
    return {"sparse_I": "framingham_only", "sparse_II": "framingham_plus_age_hba1c"}.get(policy, "full")


def _policy_learner(policy: str, config: ScenarioConfig) -> str:
    return "lasso" if policy == "linear" else config.risk.learner


def _fit_year(config: ScenarioConfig, panel: Panel, fit_year: int):
    if len(training_rows(panel, fit_year)) == 0 or not np.any(panel.year < fit_year):
        raise InsufficientDataError(
            f"no labelled history before year {fit_year}; increase 'warmup_years' or start later")


def risk_model_for(config, panel, fit_year, cache: ModelCache, view=None, learner=None):
    view = view or _policy_view(config.policy)
    learner = learner or _policy_learner(config.policy, config)
    rs = config.risk
    hp = rs.hyperparameters if learner == rs.learner else {}
    key = ("risk", cache.pin(panel), fit_year, view, learner, _key(hp), _key(rs.search), _key(rs.smote),
           rs.calibration_folds, config.seeds.model)

    def build():
        _fit_year(config, panel, fit_year)
        try:
            return train_risk_model(panel, learner, rs.search, _seed(config.seeds.model, fit_year, 1),
                                    feature_view=view, before_year=fit_year, hyperparameters=hp,
                                    smote=rs.smote, calibration_folds=rs.calibration_folds)
        except ValueError as e:
            raise InsufficientDataError(f"cannot train risk model before year {fit_year}: {e}") from e

    return cache.get(key, build)


def forest_for(config, panel, fit_year, cache: ModelCache, view=None):
    view = view or _policy_view(config.policy)
    key = ("forest", cache.pin(panel), fit_year, view, _key(config.forest), config.pooled_years,
           config.seeds.model)

    def build():
        _fit_year(config, panel, fit_year)
        try:
            return fit_causal_forest(panel, config.forest, _seed(config.seeds.model, fit_year, 2),
                                     before_year=fit_year, pooled_years=config.pooled_years,
                                     feature_view=view)
        except ValueError as e:
            raise InsufficientDataError(f"cannot fit causal forest before year {fit_year}: {e}") from e

    return cache.get(key, build)


# --------------------------------------------------------------------------- scenario

def allocation_years(config: ScenarioConfig, panel: Panel) -> list:
    if config.years is not None:
        years = sorted(int(y) for y in config.years)
    else:
        years = list(range(config.warmup_years + 1, panel.horizon + 1))
    if not years:
        raise InsufficientDataError("no allocation years: warm-up covers the whole horizon")
    if years[0] < 1 or years[-1] > panel.horizon:
        raise ValueError(f"years must lie within 1..{panel.horizon}")
    return years


def _column(panel: Panel, name: str, rows, default=None):
    if name in panel.feature_names:
        return panel.features[rows, panel.feature_index(name)]
    if default is None:
        raise ValueError(f"panel has no {name!r} column")
    return np.full(len(rows), float(default))


def _framingham(panel: Panel, rows) -> np.ndarray:
    col = lambda n: _column(panel, n, rows)  # noqa: E731
    gl = panel_matrix(panel, rows, "full")[:, -1]
    return framingham_scores(gl, col("bmi"), col("hdl"), col("sex"), col("parental_history"),
                             col("triglycerides"), col("systolic_bp"), col("diastolic_bp"),
                             col("bp_treatment"))


def estimated_effects(config, panel, rows, year, fit_year, cache, risks=None, view=None):
    """Allocation-time effect estimates for the records ``rows`` at ``year``."""
    spec = config.effect_spec
    if spec.mode == "known":
        return np.asarray(effect_at(spec, None, np.zeros((len(rows), 1)), 0.0), dtype=float).reshape(len(rows))
    forest = forest_for(config, panel, fit_year, cache, view)
    X = effect_design(panel, rows, forest.feature_view, forest.pooled_years, year=year)
    g = np.clip(forest.predict_raw(X), 0.0, 1.0)
    if config.effect_scale == "relative":
        if risks is None:
            raise ValueError("relative effect scale needs risk predictions")
        g = np.clip(forest.predict_raw(X) / np.maximum(risks, 1e-12), 0.0, 1.0)
    return g


def run_scenario(config: ScenarioConfig, panel: Panel | None = None,
                 cache: ModelCache | None = None) -> SimulationResult:
    config.validate()
    panel = panel if panel is not None else load_scenario_panel(config)
    cache = cache if cache is not None else ModelCache()
    years = allocation_years(config, panel)
    k = config.budget_k
    plan = AllocationPlan(k)
    enrolled_year: dict = {}
    cp = config.cost_params
    dx_names = [cp.comorbidity_features.get(c, "") for c in COMORBIDITIES]
    out = {c: [] for c in ("pid", "year", "treated", "new", "y", "gamma", "averted", "age", "dx")}
    fit_year = years[0]
    outcome_rng = np.random.default_rng(_seed(config.seeds.policy, 7))
    est_gamma: dict = {}
    for year in years:
        if config.retrain_each_year:
            fit_year = year
        policy_seed = _seed(config.seeds.policy, year)
        eligible = sorted(eligible_patients(panel, year) - set(enrolled_year))
        rows = latest_rows(panel, year, eligible)
        chosen: set = set()
        if k > 0 and eligible:
            chosen = _choose(config, panel, rows, eligible, year, fit_year, cache, policy_seed,
                             est_gamma)
        plan.add_year(year, eligible, chosen)
        for p in chosen:
            enrolled_year[p] = year

        # accounting population: everyone with a record this year, plus eligible carry-overs
        here = np.flatnonzero(panel.year == year)
        pop = sorted(set(panel.patient_id[here]) | set(eligible))
        prow = latest_rows(panel, year, pop)
        has_row = panel.year[prow] == year
        y = np.where(has_row, panel.onset_next[prow], np.nan)
        on = np.array([p in enrolled_year for p in pop], dtype=bool)
        since = np.array([year - enrolled_year.get(p, year) for p in pop], dtype=float)
        gamma = _accounting_gamma(config, panel, prow, pop, since, est_gamma)
        yv = np.nan_to_num(y, nan=0.0)
        if config.outcome_mode == "expected":
            averted = gamma * yv
        else:
            averted = (outcome_rng.random(len(pop)) < gamma) * yv
        out["pid"].append(np.asarray(pop, dtype=str))
        out["year"].append(np.full(len(pop), year))
        out["treated"].append(on.astype(int))
        out["new"].append(np.array([p in chosen for p in pop], dtype=int))
        out["y"].append(y)
        out["gamma"].append(gamma)
        out["averted"].append(averted)
        out["age"].append(_column(panel, config.age_feature, prow, config.default_age))
        out["dx"].append(np.column_stack([
            (panel.features[prow, panel.feature_index(n)] > 0.5).astype(int)
            if n in panel.feature_names else np.zeros(len(prow), dtype=int) for n in dx_names]))

    cat = {c: np.concatenate(v) for c, v in out.items()}
    result = SimulationResult(cat["pid"], cat["year"], cat["treated"], cat["new"], cat["y"],
                              cat["gamma"], cat["averted"], cat["age"], cat["dx"].reshape(-1, 5),
                              len(years), config.policy, k)
    result.meta["plan"] = plan
    result.meta["years"] = years
    return result


def _choose(config, panel, rows, eligible, year, fit_year, cache, seed, est_gamma) -> set:
    policy = config.policy
    k = config.budget_k
    if policy == "naive_random":
        return random_policy(eligible, k, seed)
    if policy == "clinical_framingham":
        return threshold_policy(dict(zip(eligible, _framingham(panel, rows).tolist())), k, seed)
    model = risk_model_for(config, panel, fit_year, cache)
    if model.diagnostics["max_train_year"] >= year:
        raise AssertionError("risk model was trained on records from the allocation year or later")
    risks = model.predict(panel_matrix(panel, rows, model.feature_view))
    if policy == "risk_only":
        return risk_only_policy(dict(zip(eligible, risks.tolist())), k, seed)
    gam = estimated_effects(config, panel, rows, year, fit_year, cache, risks, model.feature_view)
    for p, g in zip(eligible, gam):
        est_gamma.setdefault(p, float(g))
    gam = perturb_effects(gam, config.effect_noise_sd, _seed(seed, 99))
    return select_topk(dict(zip(eligible, risks.tolist())), dict(zip(eligible, gam.tolist())), k, seed)


def _accounting_gamma(config, panel, prow, pop, since, est_gamma) -> np.ndarray:
    """True effect where known: the stated constant in known mode, the
    generating effect on synthetic panels, otherwise the allocation estimate."""
    spec = config.effect_spec
    if spec.mode == "known":
        g = np.full(len(pop), spec.known_gamma)
        return g * np.exp(-since) if spec.decay else g
    if panel.true_gamma is not None:
        return panel.true_gamma[prow].astype(float)
    return np.array([est_gamma.get(p, 0.0) for p in pop], dtype=float)


# --------------------------------------------------------------------------- sweeps

def scenario_row(config: ScenarioConfig, result: SimulationResult) -> dict:
    s = econ.summarize(result, config.cost_params, config.bootstrap_samples, config.seeds.bootstrap)
    return {"k": config.budget_k, "policy": config.policy,
            "prevented_onsets": s["prevented_onsets"],
            "prevented_sd": s["bootstrap"]["prevented_onsets_sd"],
            "cost_savings": s["cost_savings"],
            "savings_sd": s["bootstrap"]["cost_savings_sd"]}


def budget_sweep(config: ScenarioConfig, k_values, panel: Panel | None = None,
                 cache: ModelCache | None = None) -> list:
    k_values = list(k_values)
    if not k_values:
        raise ValueError("k_values must be non-empty")
    if k_values != sorted(k_values):
        raise ValueError("k_values must be sorted ascending")
    panel = panel if panel is not None else load_scenario_panel(config)
    cache = cache if cache is not None else ModelCache()
    rows = []
    for k in k_values:
        cfg = config.with_(budget_k=int(k))
        rows.append(scenario_row(cfg, run_scenario(cfg, panel, cache)))
    return rows


def ablation_suite(config: ScenarioConfig, panel: Panel | None = None,
                   cache: ModelCache | None = None, policies=ABLATION_POLICIES) -> list:
    panel = panel if panel is not None else load_scenario_panel(config)
    cache = cache if cache is not None else ModelCache()
    rows = []
    for pol in policies:
        cfg = config.with_(policy=pol)
        rows.append(scenario_row(cfg, run_scenario(cfg, panel, cache)))
    return rows


def write_table(rows: list, path, header=SWEEP_HEADER) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(r[h], ".9g") if isinstance(r[h], float) else r[h] for h in header])


def seeded(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    """``config`` with all four seeds set to ``seed``."""
    s = int(seed)
    return config.with_(seeds=Seeds(data=s, model=s, policy=s, bootstrap=s))


def map_ordered(fn, jobs, threads: int = 1) -> list:
    """``[fn(j) for j in jobs]``, across worker processes when ``threads > 1``."""
    jobs = list(jobs)
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def _paired_one(args):
    config, policies, s, k = args
    base = seeded(config, s)
    if k is not None:
        base = base.with_(budget_k=int(k))
    panel = load_scenario_panel(base)
    cache = ModelCache()
    out = []
    for p in policies:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = run_scenario(base.with_(policy=p), panel, cache)
        out.append(econ.prevented_onsets(res))
    return out


def paired_runs(config: ScenarioConfig, policies, seeds, k=None, threads: int = 1) -> dict:
    """Prevented onsets per policy for each seed (paired comparison)."""
    policies = list(policies)
    res = map_ordered(_paired_one, [(config, policies, s, k) for s in seeds], threads)
    return {p: [r[i] for r in res] for i, p in enumerate(policies)}
