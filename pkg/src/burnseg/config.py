"""Flat ``key=value`` config files mapped onto config dataclasses.

Blank lines and lines starting with ``#`` are ignored.  Keys must match a
field name of one of the target dataclasses exactly; a key shared by several
targets (``seed``) sets all of them.  Values are converted with the type of
the field's default, tuples are written comma separated (``3,8``).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError


class UnknownKeyError(ConfigError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def read_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
    return parse_text(text, str(p))


def _convert(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [v.strip() for v in value.strip("()[] ").split(",") if v.strip()]
            return tuple(type(default[0])(v) for v in parts) if default else tuple(parts)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def valid_keys(*classes) -> list[str]:
    return sorted({f.name for cls in classes for f in dataclasses.fields(cls)})


def build_configs(values: dict[str, str], *classes, overrides: dict | None = None) -> list:
    """One instance per class in ``classes``, defaults replaced by ``values``.

    ``overrides`` holds already-typed values (command-line flags) applied
    after the file.  An unknown key raises :class:`UnknownKeyError` listing
    the valid ones.
    """
    known = valid_keys(*classes)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UnknownKeyError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(known)}")
    result = []
    for cls in classes:
        defaults = cls()
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                kwargs[f.name] = _convert(f.name, values[f.name], getattr(defaults, f.name))
            if overrides and overrides.get(f.name) is not None:
                kwargs[f.name] = overrides[f.name]
        result.append(cls(**kwargs))
    return result


def dump(obj) -> str:
    """Inverse of the parser for a single dataclass instance."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
