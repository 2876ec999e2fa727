"""Versioned JSON persistence for fitted models."""
from __future__ import annotations

import json
from pathlib import Path

MODEL_FORMAT = "prevcare-model"
MODEL_FORMAT_VERSION = 1

_REGISTRY: dict = {}


def register(kind: str, cls) -> None:
    _REGISTRY[kind] = cls


def model_to_dict(model) -> dict:
    return {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION, "model": model.to_dict()}


def model_from_dict(doc: dict):
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a prevcare model document")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')!r}")
    body = doc["model"]
    _ensure_registered()
    try:
        cls = _REGISTRY[body["kind"]]
    except KeyError:
        raise ValueError(f"unknown model kind {body.get('kind')!r}") from None
    return cls.from_dict(body)


def dump_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


def _ensure_registered() -> None:
    # model classes outside this subpackage register on import
    from .. import effect, risk  # noqa: F401
    from .forest import ForestModel
    from .gbdt import GbdtModel
    from .linear import LinearModel

    _REGISTRY.setdefault("gbdt", GbdtModel)
    _REGISTRY.setdefault("random_forest", ForestModel)
    _REGISTRY.setdefault("linear", LinearModel)
