"""Flat key=value (de)serialisation for the config dataclasses.

Field types are taken from each field's default value, so every config field
must have a default of type bool, int, float or str.
"""

from __future__ import annotations

import dataclasses
import hashlib
from fractions import Fraction

from .errors import ConfigError


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text: str) -> float:
    # accepts fractions such as 16/3
    return float(Fraction(text.strip())) if "/" in text else float(text)


def parse_value(kind: type, text: str):
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text.strip())
        if kind is float:
            return _parse_float(text)
        return text.strip()
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__}: {exc}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def field_types(cls) -> dict[str, type]:
    return {f.name: type(f.default) for f in dataclasses.fields(cls)}


def build(cls, pairs: dict[str, str]):
    """Instantiate ``cls`` from string values; keys absent from ``pairs`` keep defaults."""
    types = field_types(cls)
    kwargs = {k: parse_value(types[k], v) for k, v in pairs.items() if k in types}
    return cls(**kwargs)


def canonical(obj) -> str:
    """Key-sorted ``key=value`` lines."""
    items = sorted((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    return "".join(f"{k}={format_value(v)}\n" for k, v in items)


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs
