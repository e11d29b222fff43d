"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(value: str, typ):
    origin = typing.get_origin(typ)
    if origin is tuple:
        inner = typing.get_args(typ)[0]
        return tuple(_coerce(v.strip(), inner) for v in value.split(",") if v.strip())
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ is int:
        f = float(value)
        if f != int(f):
            raise ConfigError(f"not an integer: {value!r}")
        return int(f)
    if typ is float:
        return float(value)
    return value


def field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def apply(cls, values: dict[str, str], base=None):
    """Build ``cls`` from string values; unknown keys are rejected."""
    types = field_types(cls)
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    try:
        kwargs.update({k: _coerce(v, types[k]) for k, v in values.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cls(**kwargs)


def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None):
    values = parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    return apply(cls, values)


def dump(obj) -> str:
    lines = []
    for k, v in dataclasses.asdict(obj).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
