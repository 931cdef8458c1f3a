"""Run configuration for the command-line tools.

A run config is a TOML document with the sections ``[data]``, ``[models]``,
``[teachers]``, ``[ckl]``, ``[attack]``, ``[eval]`` and ``[output]`` plus a
top-level ``seed``.  Parsing is strict: unknown sections or keys and
values of the wrong type are rejected.  Values resolve as
command-line flags > config file > defaults.

Budgets may be written as fractions, e.g. ``epsilon = "8/255"``.
"""

from __future__ import annotations

import copy
import dataclasses
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .distill import CKLConfig
from .modelzoo.training import TrainConfig

SECTIONS = ("data", "models", "teachers", "ckl", "attack", "eval", "output")

# keys whose value may legitimately be absent
_OPTIONAL = {
    ("data", "data_dir"),
    ("models", "activation"),
    ("ckl", "cache_dir"),
    ("output", "dir"),
}
_FRACTION_KEYS = {("attack", "epsilon"), ("attack", "alpha")}


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def default_config() -> dict:
    return {
        "seed": 0,
        "data": {
            "dataset": "cifar10",
            "data_dir": None,
            "train_subset": 10_000,
            "test_subset": 1_000,
            "subset_seed": 0,
            # synthetic data only
            "num_classes": 10,
            "image_shape": [3, 32, 32],
            "synthetic_train": 2_000,
            "synthetic_test": 500,
            "synthetic_seed": 0,
        },
        "models": {"arch": "small_cnn", "activation": None},
        "teachers": {**_fields(TrainConfig), "checkpoints": []},
        "ckl": _fields(CKLConfig),
        "attack": {**_fields(AttackConfig), "batch_size": 256},
        "eval": {"models": [], "batch_size": 500, "repeats": 1, "heatmaps": True, "pairwise_average": False},
        "output": {"dir": None},
    }


def parse_fraction(value) -> float:
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot read {value!r} as a number") from e
    return float(value)


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}" if section else key
    if (section, key) in _FRACTION_KEYS:
        return parse_fraction(value)
    if value is None:
        if (section, key) in _OPTIONAL:
            return None
        raise ConfigError(f"{where} may not be empty")
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    return value


def merge(base: dict, overrides: dict) -> dict:
    """Return ``base`` updated with ``overrides``, validating every key."""
    out = copy.deepcopy(base)
    defaults = default_config()
    for key, value in overrides.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for sub, v in value.items():
                if sub not in defaults[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                out[key][sub] = _coerce(key, sub, v, defaults[key][sub])
        elif key == "seed":
            out["seed"] = _coerce("", "seed", value, 0)
        else:
            raise ConfigError(f"unknown config section or key {key!r}")
    return out


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> tuple[dict, dict]:
    """Defaults, then the TOML file at ``path``, then ``overrides``.

    Returns the resolved config and the nested dict of explicitly set keys.
    """
    explicit = read_toml(path) if path is not None else {}
    cfg = merge(default_config(), explicit)
    if overrides:
        cfg = merge(cfg, overrides)
        explicit = deep_update(copy.deepcopy(explicit), overrides)
    return cfg, explicit


def parse_assignment(text: str) -> dict:
    """``section.key=value`` (value in TOML syntax, bare words as strings) to a nested dict."""
    if "=" not in text:
        raise ConfigError(f"expected section.key=value, got {text!r}")
    lhs, rhs = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    parts = lhs.strip().split(".")
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) != 2:
        raise ConfigError(f"expected section.key=value, got {text!r}")
    return {parts[0]: {parts[1]: value}}


def deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            deep_update(a[k], v)
        else:
            a[k] = v
    return a


def _section_seed(cfg: dict, section: str, explicit: dict) -> int:
    return explicit.get(section, {}).get("seed", cfg["seed"])


def train_config(cfg: dict, explicit: dict | None = None) -> TrainConfig:
    d = {k: v for k, v in cfg["teachers"].items() if k != "checkpoints"}
    d["seed"] = _section_seed(cfg, "teachers", explicit or {})
    return TrainConfig(**d)


def ckl_config(cfg: dict, explicit: dict | None = None) -> CKLConfig:
    d = dict(cfg["ckl"])
    d["seed"] = _section_seed(cfg, "ckl", explicit or {})
    return CKLConfig(**d)


def attack_config(cfg: dict, explicit: dict | None = None) -> AttackConfig:
    """AttackConfig from ``[attack]``; targeted and Logit runs take 300 steps of 2/255 unless set."""
    explicit = explicit or {}
    given = explicit.get("attack", {})
    d = {k: v for k, v in cfg["attack"].items() if k != "batch_size"}
    d["seed"] = _section_seed(cfg, "attack", explicit)
    if d["targeted"] or d["method"] == "logit":
        d["targeted"] = True
        if "iterations" not in given:
            d["iterations"] = 300
        if "alpha" not in given:
            d["alpha"] = 2 / 255
    return AttackConfig(**d)
