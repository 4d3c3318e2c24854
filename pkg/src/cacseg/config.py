"""Plain-text ``key = value`` configuration files.

One assignment per line; ``#`` starts a comment. Keys are checked against a
schema and unknown keys are errors. :func:`dump` writes the canonical form:
sorted keys, ``true``/``false`` booleans and ``repr`` floats, so that
``parse(dump(x)) == x`` and ``dump(parse(dump(x))) == dump(x)``.
"""

from __future__ import annotations

from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for malformed configuration text or unknown keys."""


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


def parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce(raw: Mapping[str, str], schema: Mapping[str, Any]) -> dict[str, Any]:
    """Convert raw strings to the types of the schema's default values."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}; allowed: {', '.join(sorted(schema))}")
    out = {}
    for key, text in raw.items():
        kind = type(schema[key])
        try:
            if kind is bool:
                if text not in ("true", "false"):
                    raise ValueError(text)
                out[key] = text == "true"
            elif kind is int:
                out[key] = int(text)
            elif kind is float:
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError:
            raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None
    return out
