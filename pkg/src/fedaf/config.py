"""Run-config schema: YAML file -> validated, fully resolved nested dict.

Grammar (all sections are mappings; unknown keys are rejected)::

    dataset:
      source: synth | idx
      synth:      {classes, per_class, test_per_class, image_side, noise_sigma, channels, seed}
      idx:        {train_images, train_labels, test_images, test_labels, num_classes}
      partition:  {alpha, clients, seed, min_samples, max_redraws}
    model:
      arch: convnet | mlp
      width: int            # convnet channels
      hidden: [int, ...]    # mlp hidden widths
    federation:
      algorithm: fedaf | feddm | fedavg | fedprox   # required
      ...                   # any RoundConfig field
    output:
      directory: path       # relative paths resolve under $FEDAF_OUTPUT_ROOT
      export_condensed: bool
      save_model: bool

Overrides use dotted paths, ``federation.rounds=3``; values are parsed as YAML
scalars so ``true``, ``1e-3`` and ``[64, 32]`` get their natural types.
"""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Any, Iterable

import yaml

from .federation import ALGORITHMS, RoundConfig

REQUIRED = object()


class ConfigError(ValueError):
    """Schema violation; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _round_config_schema() -> dict:
    out = {}
    for f in dataclasses.fields(RoundConfig):
        out[f.name] = (type(f.default), f.default)
    out["algorithm"] = (str, REQUIRED)
    return out


SCHEMA: dict[str, Any] = {
    "dataset": {
        "source": (str, "synth"),
        "synth": {
            "classes": (int, 3),
            "per_class": (int, 300),
            "test_per_class": (int, 100),
            "image_side": (int, 8),
            "noise_sigma": (float, 0.3),
            "channels": (int, 1),
            "seed": (int, 0),
        },
        "idx": {
            "train_images": (str, ""),
            "train_labels": (str, ""),
            "test_images": (str, ""),
            "test_labels": (str, ""),
            "num_classes": (int, 10),
        },
        "partition": {
            "alpha": (float, 0.5),
            "clients": (int, 10),
            "seed": (int, 0),
            "min_samples": (int, 1),
            "max_redraws": (int, 1000),
        },
    },
    "model": {
        "arch": (str, "convnet"),
        "width": (int, 64),
        "hidden": (list, [128]),
    },
    "federation": _round_config_schema(),
    "output": {
        "directory": (str, "runs/default"),
        "export_condensed": (bool, False),
        "save_model": (bool, False),
    },
}

CHOICES = {
    "dataset.source": ("synth", "idx"),
    "model.arch": ("convnet", "mlp"),
    "federation.algorithm": ALGORITHMS,
}


def _check_type(path: str, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(path, f"expected int, got {value!r}")
    if kind is list and isinstance(value, tuple):
        return list(value)
    if not isinstance(value, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _resolve(schema: dict, raw, path: str) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    out = {}
    for key, spec in schema.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _resolve(spec, raw.get(key), sub)
            continue
        kind, default = spec
        if key not in raw:
            if default is REQUIRED:
                raise ConfigError(sub, "required key missing")
            out[key] = copy.deepcopy(default)
        else:
            out[key] = _check_type(sub, raw[key], kind)
    return out


def resolve(raw: dict) -> dict:
    """Validate ``raw`` against the schema and fill in every default."""
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping")
    if "federation" not in raw:
        raise ConfigError("federation.algorithm", "required key missing")
    cfg = _resolve(SCHEMA, raw, "")
    for path, allowed in CHOICES.items():
        section, key = path.split(".")
        if cfg[section][key] not in allowed:
            raise ConfigError(path, f"must be one of {allowed}")
    if cfg["dataset"]["source"] == "idx":
        for key, value in cfg["dataset"]["idx"].items():
            if value == "":
                raise ConfigError(f"dataset.idx.{key}", "required when source is idx")
    try:
        round_config(cfg)
    except ValueError as exc:
        raise ConfigError("federation", str(exc)) from exc
    return cfg


def round_config(cfg: dict) -> RoundConfig:
    return RoundConfig(**cfg["federation"])


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    path, text = item.split("=", 1)
    keys = path.strip().lstrip("-").split(".")
    if not all(keys):
        raise ConfigError(path, "empty path component")
    return keys, yaml.safe_load(text) if text != "" else ""


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    """Return a copy of ``raw`` with each dotted ``path=value`` applied in order."""
    raw = copy.deepcopy(raw) if raw else {}
    for item in overrides:
        keys, value = parse_override(item)
        node = raw
        for i, key in enumerate(keys[:-1]):
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(keys[: i + 1]), "is not a section")
        node[keys[-1]] = value
    return raw


def load(path, overrides: Iterable[str] = ()) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    return resolve(apply_overrides(raw or {}, overrides))
