"""JSON run configuration shared by every command.

A document holds ``schema_version`` plus any of the sections ``cohort``,
``scenario``, ``sweep`` and ``sensitivity``.  Emitted manifests are documents
too (with an extra ``manifest`` section), so they can be fed back as configs.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .cohort import GenConfig
from .sensitivity import OVB_COVARIATES, ConvergenceConfig
from .simulation import ScenarioConfig

SCHEMA_VERSION = 1
SECTIONS = ("schema_version", "cohort", "scenario", "sweep", "sensitivity", "manifest")
STUDIES = ("noise", "convergence", "ovb", "importance")
BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    pass


@dataclass
class SweepSettings:
    k_values: list = field(default_factory=lambda: [50, 100, 200])


@dataclass
class NoiseSettings:
    sigmas: list = field(default_factory=lambda: [0.0, 0.1, 0.5])
    # None runs the scenario seeds once
    seeds: list | None = None


@dataclass
class OvbSettings:
    covariates: list = field(default_factory=lambda: list(OVB_COVARIATES))
    benchmark: str = "age"
    multipliers: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    alpha: float = 0.05
    n_groups: int = 4


@dataclass
class ImportanceSettings:
    method: str = "permutation"
    n_repeats: int = 5
    n_permutations: int = 50
    n_explain: int = 200
    n_background: int = 100
    seed: int = 0


_STUDY_TYPES = {"noise": NoiseSettings, "convergence": ConvergenceConfig, "ovb": OvbSettings,
                "importance": ImportanceSettings}


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def builtin_path(name: str) -> Path:
    path = resources.files("prevcare") / "data" / f"{name}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no built-in config named {name!r}")
    return Path(str(path))


def read_document(path) -> dict:
    """Parse and check a config document.  ``builtin:NAME`` loads a packaged one.

    Missing files raise ``OSError``; malformed content raises ``ConfigError``.
    """
    spec = str(path)
    p = builtin_path(spec[len(BUILTIN_PREFIX):]) if spec.startswith(BUILTIN_PREFIX) else Path(spec)
    text = p.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{spec}: invalid JSON ({e})") from None
    check_document(doc)
    # relative panel paths are taken from the config's own directory
    sc = doc.get("scenario")
    if isinstance(sc, dict) and isinstance(sc.get("panel_path"), str):
        pp = Path(sc["panel_path"])
        if not pp.is_absolute():
            sc["panel_path"] = str((p.parent / pp).resolve())
    return doc


def check_document(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    sens = doc.get("sensitivity", {})
    if not isinstance(sens, dict):
        raise ConfigError("sensitivity: expected an object")
    bad = sorted(set(sens) - set(STUDIES))
    if bad:
        raise ConfigError(f"sensitivity: unknown studies {bad}")


def cohort_config(doc: dict) -> GenConfig:
    if "cohort" not in doc:
        raise ConfigError("config has no 'cohort' section")
    gen = _strict(GenConfig, doc["cohort"], "cohort")
    try:
        gen.validate()
    except ValueError as e:
        raise ConfigError(f"cohort: {e}") from None
    return gen


def scenario_config(doc: dict) -> ScenarioConfig:
    """The scenario section; without its own panel source it uses the top-level cohort."""
    sc = doc.get("scenario")
    if sc is None:
        raise ConfigError("config has no 'scenario' section")
    if not isinstance(sc, dict):
        raise ConfigError("scenario: expected an object")
    sc = dict(sc)
    if sc.get("cohort") is None and sc.get("panel_path") is None and "cohort" in doc:
        sc["cohort"] = doc["cohort"]
    try:
        cfg = ScenarioConfig.from_dict(sc)
        cfg.validate()
        if cfg.cohort is not None:
            cfg.cohort.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def sweep_settings(doc: dict) -> SweepSettings:
    s = _strict(SweepSettings, doc.get("sweep", {}), "sweep")
    if not s.k_values or any(int(k) != k or k < 0 for k in s.k_values):
        raise ConfigError("sweep.k_values must be a non-empty list of non-negative integers")
    if list(s.k_values) != sorted(s.k_values):
        raise ConfigError("sweep.k_values must be sorted ascending")
    return s


def study_settings(doc: dict, study: str):
    if study not in STUDIES:
        raise ConfigError(f"unknown study {study!r}; expected one of {STUDIES}")
    raw = dict(doc.get("sensitivity", {}).get(study, {}))
    if study == "convergence" and isinstance(raw.get("cohort"), dict):
        raw["cohort"] = _strict(GenConfig, raw["cohort"], "sensitivity.convergence.cohort")
    return _strict(_STUDY_TYPES[study], raw, f"sensitivity.{study}")


def settings_dict(obj) -> dict:
    return asdict(obj)


def with_overrides(doc: dict, **sections) -> dict:
    """Deep copy of ``doc`` with whole sections replaced."""
    out = copy.deepcopy(doc)
    out.pop("manifest", None)
    for k, v in sections.items():
        out[k] = v
    return out


def demo_document() -> dict:
    return read_document(BUILTIN_PREFIX + "demo")
