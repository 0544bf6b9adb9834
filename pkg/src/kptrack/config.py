"""Dataclass <-> JSON-document helpers shared by the module configs."""

from __future__ import annotations

import dataclasses
import typing

import numpy as np


class ConfigError(ValueError):
    """Unknown key, wrong type or violated invariant in a configuration document."""


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def from_dict(cls, doc: dict | None, path: str = ""):
    """Build ``cls`` from a (possibly partial) document; missing keys keep defaults."""
    if doc is None:
        return cls()
    if isinstance(doc, cls):
        return doc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for key, value in doc.items():
        tp = hints.get(key)
        sub = f"{path}.{key}" if path else key
        if _is_dataclass_type(tp):
            kwargs[key] = from_dict(tp, value, sub)
        elif isinstance(value, list) and _wants_tuple(tp):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _wants_tuple(tp) -> bool:
    origin = typing.get_origin(tp)
    if origin is tuple or tp is tuple:
        return True
    return any(a is tuple or typing.get_origin(a) is tuple for a in typing.get_args(tp))


def to_dict(obj):
    """JSON-ready nested dict of a dataclass instance."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
