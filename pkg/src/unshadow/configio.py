"""Strict dataclass <-> JSON config plumbing shared by all modules."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing


class ConfigError(ValueError):
    pass


def dataclass_from_dict(cls, data: dict, path: str = ""):
    """Builds a (possibly nested) dataclass, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _resolve(cls, ftype)
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(sub) and isinstance(value, dict):
            kwargs[name] = dataclass_from_dict(sub, value, key)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _resolve(owner, ftype):
    if isinstance(ftype, str):
        hints = typing.get_type_hints(owner)
        for f in dataclasses.fields(owner):
            if f.type == ftype:
                return hints.get(f.name, ftype)
    return ftype


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    return obj


def canonical_json(obj) -> str:
    """Sorted keys, minimal separators, repr-exact floats: stable bytes for hashing."""
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
