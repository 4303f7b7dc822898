"""Typed ``key=value`` encoding shared by config files and checkpoints."""

from __future__ import annotations

from .exceptions import ConfigError

_INT = {"in_channels", "patch_size", "embed_dim", "window_size", "batch_size", "epochs", "seed"}
_INT_TUPLE = {"depths", "num_heads"}
_FLOAT_TUPLE = {"fusion_weights"}
_BOOL = {"use_relative_position_bias"}


def parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT:
            return int(raw)
        if key in _INT_TUPLE:
            return tuple(int(x) for x in raw.split(","))
        if key in _FLOAT_TUPLE:
            return tuple(float(x) for x in raw.split(","))
        if key in _BOOL:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
