"""Resolved run configuration: defaults <- JSON file <- command-line overrides."""
from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fusion import ConfigError, FusionConfig
from .harness import VARIANTS, TrainConfig
from .synth import SceneConfig

SECTIONS = {"fusion": FusionConfig, "scene": SceneConfig, "train": TrainConfig}


@dataclass
class CliConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "CliConfig":
        _prefixed("fusion", self.fusion.validate)
        _prefixed("scene", self.scene.validate)
        validate_train(self.train)
        if self.fusion.d != self.scene.C:
            raise ConfigError("fusion.d", f"must equal scene.C ({self.scene.C}), got {self.fusion.d}")
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _prefixed(section: str, fn):
    try:
        return fn()
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def validate_train(t: TrainConfig) -> TrainConfig:
    def pos_int(name, v, minimum=1):
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            raise ConfigError(f"train.{name}", f"must be an integer >= {minimum}, got {v!r}")

    pos_int("epochs", t.epochs, 0)
    pos_int("batch", t.batch)
    pos_int("seed", t.seed, 0)
    pos_int("n_train", t.n_train, 0)
    pos_int("n_test", t.n_test, 0)
    if not isinstance(t.lr, (int, float)) or t.lr < 0:
        raise ConfigError("train.lr", f"must be a number >= 0, got {t.lr!r}")
    if not isinstance(t.seeds, list) or not t.seeds:
        raise ConfigError("train.seeds", "must be a non-empty list of integers")
    for s in t.seeds:
        pos_int("seeds", s, 0)
    if not isinstance(t.K_values, list) or not t.K_values:
        raise ConfigError("train.K_values", "must be a non-empty list of integers")
    for k in t.K_values:
        pos_int("K_values", k, 1)
    if t.variant not in VARIANTS:
        raise ConfigError("train.variant", f"must be one of {VARIANTS}, got {t.variant!r}")
    return t


def _build(raw: dict) -> CliConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    parts = {}
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown config section")
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(name, "section must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in section:
            if key not in known:
                raise ConfigError(f"{name}.{key}", "unknown config key")
        merged = {**asdict(cls()), **section}
        parts[name] = cls(**merged)
    return CliConfig(**parts)


def field_types(section: str) -> dict[str, type]:
    hints = typing.get_type_hints(SECTIONS[section])
    return {f.name: hints[f.name] for f in fields(SECTIONS[section])}


def coerce(section: str, key: str, text: str):
    """Parse a command-line string into the declared type of ``section.key``."""
    types = field_types(section)
    if key not in types:
        raise ConfigError(f"{section}.{key}", "unknown config key")
    tp = types[key]
    try:
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is list:
            return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"cannot parse {text!r} as {tp}") from None
    return text


def load_config(path=None, overrides: dict | None = None) -> CliConfig:
    """Resolve defaults, then the JSON file at ``path``, then ``overrides``.

    ``overrides`` maps dotted keys such as ``"fusion.K"`` to already-typed values.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            line = text.splitlines()[exc.lineno - 1] if text.splitlines() else ""
            raise ConfigError("config", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg} near {line.strip()!r}") \
                from None
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(dotted, "override keys must look like 'section.field'")
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(section, "section must be a JSON object")
        raw[section][key] = value
    return _build(raw).validate()
