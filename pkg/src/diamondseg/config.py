"""Key-value configuration files (INI sections) mapped onto the package's config dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .errors import InvalidConfig, MissingFile

SECTIONS = ("synth", "preprocess", "train", "pipeline", "grid", "noise")


def load_config(path) -> dict[str, dict[str, str]]:
    """Read an INI file into ``{section: {key: raw value}}``; unknown sections are rejected."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    return {s: dict(parser[s]) for s in parser.sections()}


def _parse(raw: str, default, name: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.replace(" ", "").split(",") if v)
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return tuple(float(v) for v in text.replace(" ", "").split(","))
        return text
    except ValueError as exc:
        raise InvalidConfig(f"{name}: cannot parse {raw!r}") from exc


def coerce(cls, values: dict[str, str], base=None):
    """Build ``cls`` from raw strings, typed by the defaults of ``base`` (or ``cls()``)."""
    base = base if base is not None else cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise InvalidConfig(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    changes = {}
    for key, raw in values.items():
        default = getattr(base, key)
        if dataclasses.is_dataclass(default):
            raise InvalidConfig(f"{key} is configured through its own section")
        changes[key] = _parse(raw, default, key)
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc
