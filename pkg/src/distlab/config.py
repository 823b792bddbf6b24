"""Experiment configuration: a JSON document validated against a schema, merged over defaults."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "data": {
        "source": "synthetic",
        "vocabulary": {"kind": "random", "n_features": 16, "n_classes": 5, "patch_dim": 8,
                       "concentration": 0.3, "sharpness": 3.0, "neighbors": 2, "mean_spread": 1.0,
                       "representation_scale": 0.3},
        "sizes": {"train": 2000, "holdout": 500, "temperature-holdout": 500, "test": 1000},
        "m": 3,
        "transforms": {"magnitude": 0.5, "count": 8, "permute": False},
    },
    "teacher": {
        "architecture": {"kind": "generic-mlp", "hidden": [128, 128]},
        "epochs": 30, "batch_size": 64,
        "optimizer": {"learning_rate0": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
                      "decay_milestones": [15, 23], "decay_factor": 0.1},
        "lambda_lr": 1e-5,
        "cr_schedule": {"kind": "linear", "max_weight": 1.0},
        "mode": "soteacher", "checkpoint_every": 10, "augment": True,
    },
    "student": {
        "architecture": {"kind": "generic-mlp", "hidden": [32, 32]},
        "alpha": 0.5, "temperature": 4.0, "epochs": 30, "batch_size": 64,
        "optimizer": {"learning_rate0": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
                      "decay_milestones": [15, 23], "decay_factor": 0.1},
        "augment": True,
    },
    "eval": {"bins": 15, "norms": [1, 2, "inf"]},
    "sweep": {"parameter": "n_train", "grid": [500, 2000, 8000], "seeds": [0, 1, 2], "setup": {}},
    "theory": {
        "delta": 0.1,
        "lemma1": {"n_features": 8, "n_classes": 3, "patch_dim": 4, "m": 2, "n": 2000,
                   "steps": 3000, "lr": 1.0, "tolerance": 1e-3},
        "lemma2": {"n_features": 8, "n_classes": 3, "m": 2, "n_grid": [500, 2000, 8000, 32000],
                   "seeds": [0, 1, 2, 3, 4], "slope": -0.5, "slope_tolerance": 0.1},
        "lemma3": {"z_grid": [4, 8, 16, 32], "n_classes": 3, "m": 3, "n": 20000, "seeds": [0, 1, 2]},
        "theorem": {"parameter": "n_features", "grid": [8, 16, 32], "seeds": [0, 1, 2],
                    "setup": {"n_train": 4000, "epochs": 15}},
    },
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_INTLIST = {"type": "array", "items": {"type": "integer", "minimum": 0}}


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


_OPTIMIZER = _obj({"learning_rate0": _POS, "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                   "weight_decay": _NONNEG, "decay_milestones": _INTLIST,
                   "decay_factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}})
_ARCH = _obj({"kind": {"enum": ["generic-mlp", "patchwise"]},
              "hidden": {"type": "array", "items": _POSINT},
              "head": {"enum": ["standard-softmax", "modified-softmax"]},
              "feature_dim": _POSINT})
_FEATURE = _obj({"name": {"type": "string"},
                 "label_distribution": {"type": "array", "items": _NONNEG, "minItems": 1},
                 "representation_mean": {"type": "array", "items": _NUM},
                 "representation_scale": _NONNEG},
                ("label_distribution", "representation_mean"))

SCHEMA: dict = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({
        "source": {"enum": ["synthetic", "external"]},
        "vocabulary": _obj({
            "kind": {"enum": ["random", "manifold", "explicit"]},
            "n_features": _POSINT, "n_classes": _POSINT, "patch_dim": _POSINT,
            "concentration": _POS, "sharpness": _NONNEG, "neighbors": _POSINT,
            "mean_spread": _NONNEG, "representation_scale": _NONNEG,
            "features": {"type": "array", "items": _FEATURE, "minItems": 1},
            "sampling_weights": {"type": "array", "items": _NONNEG, "minItems": 1},
        }),
        "external": _obj({"path": {"type": "string"}, "format": {"enum": ["idx", "csv"]},
                          "labels_path": {"type": "string"}, "n_classes": _POSINT,
                          "header": {"type": "boolean"}}, ("path", "format")),
        "sizes": _obj({"train": _POSINT, "holdout": _POSINT, "temperature-holdout": _POSINT,
                       "test": _POSINT}),
        "m": _POSINT,
        "transforms": _obj({"magnitude": _NONNEG, "count": _POSINT, "permute": {"type": "boolean"}}),
    }),
    "teacher": _obj({
        "architecture": _ARCH, "epochs": _POSINT, "batch_size": _POSINT, "optimizer": _OPTIMIZER,
        "lambda_lr": _NONNEG,
        "cr_schedule": _obj({"kind": {"enum": ["linear", "cosine", "cyclic", "piecewise"]},
                             "max_weight": _NONNEG}),
        "mode": {"enum": ["standard", "soteacher", "no-lr", "no-cr"]},
        "checkpoint_every": _POSINT, "augment": {"type": "boolean"},
    }),
    "student": _obj({
        "architecture": _ARCH, "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "temperature": _POS, "epochs": _POSINT, "batch_size": _POSINT, "optimizer": _OPTIMIZER,
        "augment": {"type": "boolean"},
    }),
    "eval": _obj({"bins": _POSINT,
                  "norms": {"type": "array", "items": {"enum": [1, 2, "inf"]}, "minItems": 1}}),
    "sweep": _obj({"parameter": {"type": "string"}, "grid": {"type": "array", "items": _NUM, "minItems": 1},
                   "seeds": _INTLIST, "setup": {"type": "object"}}),
    "theory": {"type": "object"},
})


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _dotted(path) -> str:
    return ".".join(str(p) for p in path)


def validate(config: dict) -> dict:
    """Schema-check a user document (before defaults), then run semantic checks on the merged result."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(config), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        raise ConfigError(_dotted(err.absolute_path), err.message)
    merged = deep_merge(DEFAULTS, config)
    _semantic_checks(merged)
    return merged


def _semantic_checks(cfg: dict) -> None:
    vocab = cfg["data"]["vocabulary"]
    if cfg["data"]["source"] == "external" and "external" not in cfg["data"]:
        raise ConfigError("data.external", "external source needs a data.external section")
    if vocab["kind"] == "explicit":
        feats = vocab.get("features")
        if not feats:
            raise ConfigError("data.vocabulary.features", "explicit vocabulary needs features")
        weights = vocab.get("sampling_weights") or [1.0 / len(feats)] * len(feats)
        if len(weights) != len(feats):
            raise ConfigError("data.vocabulary.sampling_weights", "length must equal number of features")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ConfigError("data.vocabulary.sampling_weights", f"must sum to 1 (got {sum(weights)!r})")
        for i, f in enumerate(feats):
            if abs(sum(f["label_distribution"]) - 1.0) > 1e-12:
                raise ConfigError(f"data.vocabulary.features.{i}.label_distribution", "must sum to 1")
    for section in ("teacher", "student"):
        ms = cfg[section]["optimizer"]["decay_milestones"]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"{section}.optimizer.decay_milestones", "must be strictly increasing")
    grid = cfg["sweep"]["grid"]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("sweep.grid", "must be strictly increasing")


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read, validate and resolve a config file (or the defaults when ``path`` is None)."""
    doc: dict = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError("", f"config file {path} does not exist")
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("", "top level must be an object")
    if overrides:
        doc = deep_merge(doc, overrides)
    return validate(doc)


def dump_resolved(config: dict, out_dir, name: str = "resolved_config.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(config, indent=2, sort_keys=True))
    return path
