"""Experiment configuration: YAML documents validated against a JSON Schema.

A config is a YAML mapping (read with ``yaml.safe_load``).  Missing keys
take the defaults in :data:`DEFAULTS`, which are desk-scale versions of the
reference experiments.  ``divem --print-schema`` prints :data:`SCHEMA`.
"""

from __future__ import annotations

import copy
import json
from typing import Any, Dict, Optional

import jsonschema
import yaml

from ..errors import ConfigError

__all__ = ["SCHEMA", "DEFAULTS", "load_config", "resolve", "schema_json"]

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "divem experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["family"],
    "properties": {
        "family": {"enum": ["mixture", "hmm", "kalman", "dirichlet"]},
        "mode": {"enum": ["batch", "online", "distributed"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": _pos_int,
                "dim": _pos_int,
                "emission": {"enum": ["gaussian", "poisson"]},
                "transient": _pos_int,
                "absorbing": _pos_int,
                "hidden_dim": _pos_int,
                "length": _pos_int,
                "update": {
                    "type": "array",
                    "items": {"enum": ["pi1", "V", "A", "C", "Q", "R"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "csv"]},
                "path": {"type": "string"},
                "holdout_path": {"type": "string"},
                "count": _pos_int,
                "holdout": {"type": "integer", "minimum": 0},
                "words_per_doc": _pos_int,
                "max_len": _pos_int,
                "separation": _pos_num,
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"eta0": _pos_num, "beta": {"type": "number"}},
        },
        "batch_size": _pos_int,
        "epochs": _pos_int,
        "repeats": _pos_int,
        "batch_iterations": _pos_int,
        "holdout_every": _pos_int,
        "record_time": {"type": "boolean"},
        "pseudo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"count": _pos_int, "words": _pos_int},
        },
        "distributed": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "workers": _pos_int,
                "sync_every": _pos_int,
                "strategies": {
                    "type": "array",
                    "items": {"enum": ["entropic", "simple"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "alpha": {"enum": ["shard_size", "uniform"]},
            },
        },
    },
}

# Per-family defaults, applied beneath whatever the file sets.
DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mixture": {
        "mode": "distributed",
        "model": {"k": 5, "dim": 5, "emission": "gaussian"},
        "data": {"source": "synthetic", "count": 6000, "holdout": 1000, "separation": 2.0},
        "schedule": {"eta0": 0.05, "beta": 0.5},
        "batch_size": 1,
    },
    "hmm": {
        "mode": "online",
        "model": {"transient": 3, "absorbing": 1, "dim": 4, "emission": "gaussian"},
        "data": {"source": "synthetic", "count": 500, "holdout": 100, "max_len": 1000},
        "schedule": {"eta0": 0.5, "beta": 0.9},
        "batch_size": 1,
    },
    "kalman": {
        "mode": "online",
        "model": {"hidden_dim": 5, "dim": 10, "length": 10, "update": ["pi1", "V", "A", "C"]},
        "data": {"source": "synthetic", "count": 500, "holdout": 100},
        "schedule": {"eta0": 1.0, "beta": 0.9},
        "batch_size": 1,
    },
    "dirichlet": {
        "mode": "online",
        "model": {"dim": 10},
        "data": {"source": "synthetic", "count": 500, "holdout": 100, "words_per_doc": 100},
        "schedule": {"eta0": 1.0, "beta": 0.9},
        "batch_size": 25,
        "pseudo": {"count": 2000},
    },
}

COMMON = {
    "seed": 0,
    "epochs": 1,
    "repeats": 20,
    "batch_iterations": 10,
    "holdout_every": 1,
    "record_time": False,
    "distributed": {"workers": 3, "sync_every": 500, "strategies": ["entropic", "simple"], "alpha": "shard_size"},
}


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def resolve(raw: Optional[dict], seed: Optional[int] = None) -> dict:
    """Validate ``raw``, fill defaults and check cross-field requirements."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{_error_path(exc)}: {exc.message}") from None
    cfg = _merge(_merge(COMMON, DEFAULTS[raw["family"]]), raw)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        cfg["seed"] = int(seed)

    beta = cfg["schedule"]["beta"]
    # beta = 0.5 passes here; the schedule itself warns about it
    if not 0.5 <= beta <= 1.0:
        raise ConfigError(f"schedule.beta: {beta} is outside (0.5, 1]")
    fam, mode = cfg["family"], cfg["mode"]
    if mode == "distributed" and fam not in ("mixture", "hmm"):
        raise ConfigError(f"mode 'distributed' needs a combinable family, not {fam!r}")
    if cfg["data"].get("source") == "csv" and "path" not in cfg["data"]:
        raise ConfigError("data.path is required when data.source is 'csv'")
    if fam == "dirichlet" and cfg["model"]["dim"] < 2:
        raise ConfigError("model.dim must be at least 2 for the dirichlet family")
    if cfg["model"].get("emission") == "poisson" and cfg["model"]["dim"] != 1:
        raise ConfigError("poisson emissions are one-dimensional; set model.dim to 1")
    return cfg


def load_config(path, seed: Optional[int] = None) -> dict:
    """Read, validate and resolve a YAML config file."""
    with open(path) as fh:  # OSError propagates as an I/O failure
        text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{path}: {where}invalid YAML") from None
    return resolve(raw, seed)
