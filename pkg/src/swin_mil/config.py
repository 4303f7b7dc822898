"""Line-oriented ``key = value`` run configuration.

Every key is a field of :class:`ModelConfig` or :class:`TrainConfig`;
unknown keys are rejected. Tuples are comma separated, booleans are
``true``/``false``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from ._kv import format_value, parse_value
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
SCHEMA = frozenset(MODEL_KEYS + TRAIN_KEYS)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, raw)
    return values


@dataclass
class RunConfig:
    """Merged model + training configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_values(cls, values: Mapping[str, object], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        unknown = set(values) - SCHEMA
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model_kw = {**asdict(base.model), **{k: v for k, v in values.items() if k in MODEL_KEYS}}
        if "depths" in values and "fusion_weights" not in values and len(values["depths"]) != len(base.model.depths):
            model_kw["fusion_weights"] = None
        train_kw = {**asdict(base.train), **{k: v for k, v in values.items() if k in TRAIN_KEYS}}
        return cls(model=ModelConfig(**model_kw), train=TrainConfig(**train_kw))

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_values(parse_config_text(text, str(path)), base)

    def to_text(self) -> str:
        lines = [f"{k} = {format_value(v)}" for k, v in asdict(self.model).items()]
        lines += [f"{k} = {format_value(v)}" for k, v in asdict(self.train).items()]
        return "\n".join(lines) + "\n"
