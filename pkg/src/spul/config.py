"""Run configuration: INI files of ``[section] key = value`` plus command-line overrides.

Every setting has a dotted name such as ``unlearn.alpha``. Unknown
sections or keys are rejected so typos cannot silently fall back to a
default.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs",
    "data.n_train": 4000,
    "data.n_test": 1000,
    "data.n_entities": 10,
    "data.entity_rate": 0.5,
    "data.stance_rate": 0.5,
    "data.balance": 0.5,
    "data.task": "sentiment",
    "split.protocol": "entities",
    "split.lexicon": "aldren,brisco",
    "split.k": 20,
    "split.n_chosen": 1,
    "split.tau": 1.0,
    "model.d": 64,
    "model.n_layers": 4,
    "model.n_heads": 4,
    "model.context": 128,
    "model.positional": "rope",
    "base.epochs": 6,
    "base.lr": 2e-3,
    "base.batch_size": 32,
    "base.prefix_rate": 0.3,
    "base.lm_weight": 1.0,
    "unlearn.alpha": 1.0,
    "unlearn.beta": 0.5,
    "unlearn.p": 30,
    "unlearn.lr": 3e-3,
    "unlearn.epochs": 10,
    "unlearn.batch_size": 32,
    "unlearn.init": "vocab",
    "unlearn.optimizer": "adam",
    "unlearn.momentum": 0.0,
    "baseline.method": "ga",
    "baseline.lr_grid": "1e-4,3e-4,1e-3",
    "baseline.epochs": 1,
    "baseline.batch_size": 32,
    "baseline.retain_weight": 1.0,
}


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def _coerce(key: str, value: Any) -> Any:
    """Convert ``value`` to the type of the default for ``key``."""
    if key not in DEFAULTS:
        raise ConfigKeyError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ValueError(f"config key {key!r} expects {kind.__name__}, got {text!r}") from None
    return text


class RunConfig:
    """Resolved settings for one pipeline run."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        self.update(values or {})

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        for key, value in values.items():
            if value is None:
                continue
            self.values[key] = _coerce(key, value)
        return self

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigKeyError(f"unknown config key {key!r}")
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_dict(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def digest(self) -> str:
        """sha256 of the canonical JSON form; ``out_dir`` does not count."""
        body = {k: v for k, v in self.values.items() if k != "out_dir"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="run")
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        values = {}
        for key, value in parser.defaults().items():
            values[key] = value
        for section in parser.sections():
            for key, value in parser.items(section, raw=True):
                if key in parser.defaults():
                    continue
                values[f"{section}.{key}"] = value
        return cls(values)

    def write(self, path) -> None:
        """Save as an INI file that :meth:`from_file` reads back unchanged."""
        parser = configparser.ConfigParser(interpolation=None, default_section="run")
        parser.optionxform = str
        for key, value in self.to_dict().items():
            if "." in key:
                section, name = key.split(".", 1)
                if not parser.has_section(section):
                    parser.add_section(section)
                parser.set(section, name, repr(value) if isinstance(value, float) else str(value))
            else:
                parser.set("run", key, str(value))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    """``["unlearn.alpha=0.5", ...]`` -> ``{"unlearn.alpha": "0.5"}``."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigKeyError(f"unknown config key {key!r}")
        out[key] = value.strip()
    return out


def parse_floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]
