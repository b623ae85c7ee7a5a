"""Plain-text ``key=value`` serialisation of flat dataclass configs."""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigurationError


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str, kind, key: str = "?"):
    text = text.strip()
    origin = typing.get_origin(kind)
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if origin is tuple:
            inner = typing.get_args(kind)[0]
            return tuple(parse_value(t, inner, key) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"invalid value {text!r} for key {key!r}") from None


def field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if not f.name.startswith("_")}


def to_items(cfg, prefix: str = "") -> list[tuple[str, str]]:
    return [(prefix + name, format_value(getattr(cfg, name))) for name in field_types(type(cfg))]


def from_items(cls, items: dict[str, str], strict: bool = True):
    """Build ``cls`` from string values; unknown keys raise when ``strict``."""
    types = field_types(cls)
    unknown = set(items) - set(types)
    if strict and unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {k: parse_value(v, types[k], k) for k, v in items.items() if k in types}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items:
            fh.write(f"{key}={value}\n")
