"""Flat ``key = value`` config files: one pair per line, ``#`` starts a comment."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def parse_config(text: str) -> dict[str, str]:
    """Raw string pairs; duplicate keys and lines without ``=`` are errors."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", n)
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", n)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", n)
        out[key] = val
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def _coerce(key: str, val: str, default: Any):
    if isinstance(default, bool):
        v = val.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {val!r}")
    try:
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            return tuple(int(x) for x in val.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {type(default).__name__}") from None
    return val


def build(cls: type[T], raw: dict[str, str], **overrides) -> T:
    """Instantiate dataclass ``cls`` from string pairs, typed by each field's default."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} for {cls.__name__}")
    kw = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}
    kw.update(overrides)
    return cls(**kw)
