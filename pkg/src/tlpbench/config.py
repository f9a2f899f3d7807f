"""Run configuration: INI file with section headers, defaults, typed validation, flag overrides.

Keys are unique across sections, so a command-line flag ``--some-key`` maps to
exactly one ``some_key`` regardless of the section it lives in.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

from .contrast import SELF_KINDS
from .trainers import METHODS

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


@dataclass(frozen=True)
class Key:
    section: str
    kind: type
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple[str, ...] | None = None


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _prob(v):
    return 0.0 <= v < 1.0


def _unit(v):
    return 0.0 <= v <= 1.0


_U64 = (1 << 64) - 1

SCHEMA: dict[str, Key] = {
    # data
    "dataset": Key("data", str, "sbm"),
    "data_root": Key("data", str, "data"),
    # evaluation protocol
    "val_interval": Key("protocol", int, 10, _pos, ">= 1"),
    "tasks": Key("protocol", int, 100, _pos, ">= 1"),
    "patience": Key("protocol", int, 10, _pos, ">= 1"),
    "max_epochs": Key("protocol", int, 10000, _pos, ">= 1"),
    "repeats": Key("protocol", int, 5, _pos, ">= 1"),
    "n_way": Key("protocol", int, 2, lambda v: v >= 2, ">= 2"),
    "k_shot": Key("protocol", int, 5, _pos, ">= 1"),
    "m_query": Key("protocol", int, 10, _pos, ">= 1"),
    "pooled_ci": Key("protocol", bool, False),
    "resample_validation": Key("protocol", bool, False),
    "threads": Key("protocol", int, 1, _pos, ">= 1"),
    "seed": Key("protocol", int, 0, lambda v: 0 <= v <= _U64, "in [0, 2^64)"),
    # training
    "method": Key("train", str, "tlp-infonce", choices=METHODS),
    "lr": Key("train", float, 1e-3, _pos, "> 0"),
    "weight_decay": Key("train", float, 1e-4, _nonneg, ">= 0"),
    "dropout": Key("train", float, 0.5, _prob, "in [0, 1)"),
    "hidden": Key("train", int, 16, _pos, ">= 1"),
    "out_dim": Key("train", int, 16, _pos, ">= 1"),
    "temperature": Key("train", float, 0.5, _pos, "> 0"),
    "lambda": Key("train", float, 0.5, _unit, "in [0, 1]"),
    "self_kind": Key("train", str, "InfoNCE", choices=SELF_KINDS),
    "edge_drop": Key("train", float, 0.3, _prob, "in [0, 1)"),
    "feature_mask": Key("train", float, 0.3, _prob, "in [0, 1)"),
    "ema_decay": Key("train", float, 0.99, _unit, "in [0, 1]"),
    "inner_steps": Key("train", int, 20, _pos, ">= 1"),
    "inner_lr": Key("train", float, 0.05, _pos, "> 0"),
    # linear probe
    "probe_l2": Key("probe", float, 1e-2, _nonneg, ">= 0"),
    "probe_lr": Key("probe", float, 0.5, _pos, "> 0"),
    "probe_iters": Key("probe", int, 1000, _pos, ">= 1"),
    "probe_tol": Key("probe", float, 1e-6, _nonneg, ">= 0"),
    "standardize": Key("probe", bool, True),
    # synthetic stochastic block model (dataset = sbm)
    "sbm_classes": Key("sbm", int, 6, lambda v: v >= 3, ">= 3"),
    "nodes_per_class": Key("sbm", int, 100, _pos, ">= 1"),
    "p_in": Key("sbm", float, 0.2, _unit, "in [0, 1]"),
    "p_out": Key("sbm", float, 0.01, _unit, "in [0, 1]"),
    "feature_dim": Key("sbm", int, 32, _pos, ">= 1"),
    "separation": Key("sbm", float, 3.0, _nonneg, ">= 0"),
    "noise_std": Key("sbm", float, 1.0, _nonneg, ">= 0"),
    "train_classes": Key("sbm", int, 2, _pos, ">= 1"),
    "dev_classes": Key("sbm", int, 2, _pos, ">= 1"),
    "test_classes": Key("sbm", int, 2, _pos, ">= 1"),
}

SECTIONS = tuple(dict.fromkeys(k.section for k in SCHEMA.values()))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(name: str, raw: Any) -> Any:
    """Convert and validate one value; raises ConfigError naming the key."""
    if name not in SCHEMA:
        raise ConfigError(f"unknown config key {name!r}")
    key = SCHEMA[name]
    value = raw
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if key.kind is bool:
                if text.lower() not in _TRUE | _FALSE:
                    raise ValueError(text)
                value = text.lower() in _TRUE
            elif key.kind is int:
                value = int(text)
            elif key.kind is float:
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ConfigError(f"{name}: expected {key.kind.__name__}, got {raw!r}") from None
    elif key.kind is float and isinstance(raw, int) and not isinstance(raw, bool):
        value = float(raw)
    if not isinstance(value, key.kind) or (key.kind is int and isinstance(value, bool)):
        raise ConfigError(f"{name}: expected {key.kind.__name__}, got {raw!r}")
    if key.choices is not None and value not in key.choices:
        raise ConfigError(f"{name}: {value!r} is not one of {', '.join(key.choices)}")
    if key.check is not None and not key.check(value):
        raise ConfigError(f"{name}: {value!r} out of range ({key.rule})")
    return value


class RunConfig(Mapping[str, Any]):
    """Fully resolved, validated configuration."""

    def __init__(self, values: Mapping[str, Any]):
        self._values = dict(values)

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, name: str) -> dict[str, Any]:
        return {k: v for k, v in self._values.items() if SCHEMA[k].section == name}

    def replace(self, **changes: Any) -> "RunConfig":
        values = dict(self._values)
        for k, v in changes.items():
            values[k] = coerce(k, v)
        return RunConfig(values)

    def to_ini(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            for k, v in self.section(sec).items():
                lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def read_config_file(path: str | Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw: dict[str, str] = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for k, v in parser.items(sec):
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r} in section [{sec}]")
            if SCHEMA[k].section != sec:
                raise ConfigError(f"key {k!r} belongs in section [{SCHEMA[k].section}], not [{sec}]")
            raw[k] = v
    return raw


def parse_config(path: str | Path | None = None, flags: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then file values, then flag values (flags win); everything validated up front."""
    merged: dict[str, Any] = {k: key.default for k, key in SCHEMA.items()}
    if path is not None:
        merged.update(read_config_file(path))
    for k, v in (flags or {}).items():
        if v is not None:
            merged[k] = v
    cfg = RunConfig({k: coerce(k, v) for k, v in merged.items()})
    split = cfg["train_classes"] + cfg["dev_classes"] + cfg["test_classes"]
    if split != cfg["sbm_classes"]:
        raise ConfigError(f"train_classes + dev_classes + test_classes = {split} but sbm_classes = {cfg['sbm_classes']}")
    if cfg["feature_dim"] < cfg["sbm_classes"]:
        raise ConfigError("feature_dim must be >= sbm_classes")
    log.info("resolved configuration:\n%s", cfg.to_ini())
    return cfg
