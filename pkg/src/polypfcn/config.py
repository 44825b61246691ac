"""Run configuration: one INI document with a section per module.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
``--set section.key=value`` overrides, then dedicated command-line flags
(``--seed``, ``--count``, ...). Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .fcnnet import NetworkSpec, TrainConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PostprocConfig:
    bins: int = 256
    connectivity: int = 8

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class MetricsConfig:
    connectivity: int = 8
    # None: a predicted component is a false positive iff it misses the GT entirely
    min_iou: float | None = None

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.min_iou is not None and not 0 < self.min_iou <= 1:
            raise ValueError("min_iou must lie in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = SynthConfig()
    # synthetic frames default to 64 px, so the CLI samples 32 px patches
    augment: AugmentConfig = AugmentConfig(patch_size=32)
    network: NetworkSpec = NetworkSpec()
    train: TrainConfig = TrainConfig()
    postproc: PostprocConfig = PostprocConfig()
    metrics: MetricsConfig = MetricsConfig()

    SECTIONS = ("synth", "augment", "network", "train", "postproc", "metrics")

    def with_values(self, values: dict[str, dict[str, str]]) -> "RunConfig":
        """Apply string values keyed by section and field name."""
        updated = {}
        for section, items in values.items():
            if section not in self.SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            current = getattr(self, section)
            known = {f.name: f for f in fields(current)}
            changes = {}
            for key, raw in items.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
                changes[key] = _parse(getattr(current, key), raw, f"{section}.{key}")
            try:
                updated[section] = replace(current, **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from None
        return replace(self, **updated)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.with_values({s: {"seed": str(seed)} for s in ("synth", "augment", "train")})

    def to_ini(self) -> str:
        lines = []
        for section in self.SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar(example: Any, raw: str, where: str):
    raw = raw.strip()
    try:
        if isinstance(example, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(example, int):
            return int(raw, 0)
        if isinstance(example, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(example).__name__}") from None
    return raw


def _parse(current: Any, raw: str, where: str):
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        example = current[0] if current else 0.0
        if where == "augment.angles":
            example = 0.0
        values = tuple(_scalar(example, p, where) for p in parts)
        if where == "augment.angles":
            values = tuple(int(v) if float(v).is_integer() else v for v in values)
        return values
    if where == "metrics.min_iou":
        return None if raw.strip().lower() in ("", "none") else _scalar(0.0, raw, where)
    return _scalar(current, raw, where)


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_overrides(items: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name or not section.strip():
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        config = config.with_values(read_ini(path))
    if overrides:
        config = config.with_values(parse_overrides(overrides))
    return config
