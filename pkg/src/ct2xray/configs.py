"""Strict dataclass <-> dict config plumbing with dotted-key overrides.

Unknown keys are refused (listed by full path) rather than silently ignored,
so a typo never turns into a default.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError


def dataclass_from_dict(cls, data, path=""):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {path or cls.__name__}, "
                          f"got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config keys under {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
                isinstance(f.default_factory, type)
                and dataclasses.is_dataclass(f.default_factory)):
            target = f.type if dataclasses.is_dataclass(f.type) else f.default_factory
            kwargs[name] = dataclass_from_dict(target, value, sub)
        elif isinstance(value, list) and _wants_tuple(cls, name):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _wants_tuple(cls, name):
    default = getattr(cls(), name, None) if _constructible(cls) else None
    return isinstance(default, tuple)


def _constructible(cls):
    try:
        cls()
        return True
    except TypeError:
        return False


def dataclass_to_dict(obj):
    return dataclasses.asdict(obj)


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data, overrides):
    """Apply dotted-key overrides to a nested dict in place."""
    for item in overrides or []:
        key, value = parse_override(item)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


def load_config(cls, config_path=None, overrides=None, seed=None):
    """Resolve a config dataclass from an optional JSON file plus overrides."""
    data = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        data = json.loads(path.read_text())
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return dataclass_from_dict(cls, data)


def write_resolved(obj, out_dir, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dataclass_to_dict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
    if extra:
        payload = {**payload, **extra}
    path = out_dir / "config_resolved.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path
