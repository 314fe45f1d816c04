# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import time
from dataclasses import fields, is_dataclass
from enum import Enum
from typing import get_type_hints, Type, Union, TypeVar, Optional

from .error import ConfigError


def dataclass_factory_filter_empty(data):
    return {key: _plain(value) for key, value in data if value is not None}


def _plain(value):
    # Enums are written by value so JSON stays readable
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


T = TypeVar("T")


def _unwrap_optional(field_type):
    if hasattr(field_type, '__origin__') and field_type.__origin__ is Union:
        inner_types = field_type.__args__
        if len(inner_types) == 2 and type(None) in inner_types:
            return [t for t in inner_types if t is not type(None)][0]
    return field_type


def deserialize_dataclass(cls: Type[T], data: Union[dict, list]) -> T:
    """
    Recursively deserialize data into a dataclass or a list of dataclasses.
    Unexpected keys are ignored. Use strict_dataclass() for user-written config files.
    """
    if isinstance(data, list):
        inner_type = cls.__args__[0] if hasattr(cls, '__args__') else None
        if inner_type and is_dataclass(inner_type):
            return [deserialize_dataclass(inner_type, item) for item in data]
        return data

    cls = _unwrap_optional(cls)
    if isinstance(data, dict) and is_dataclass(cls):
        field_types = get_type_hints(cls)
        return cls(
            **{
                key: deserialize_dataclass(field_types[key], value)
                for key, value in data.items()
                if key in field_types  # Ignore unexpected fields
            }
        )
    if isinstance(cls, type) and issubclass(cls, Enum) and data is not None:
        return cls(data)
    return data


def _typed_value(field_type, value, where: str):
    """ Check a JSON scalar against a bool, int, float or str annotation; ints are accepted for floats """
    if field_type is bool:
        ok = isinstance(value, bool)
    elif field_type is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif field_type is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif field_type is str:
        ok = isinstance(value, str)
    else:
        return value
    if not ok:
        raise ConfigError("%s: expected %s, got %s %r" % (where, field_type.__name__, type(value).__name__, value))
    return value


def _typed_tuple(field_type, value, where: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError("%s: expected a JSON array, got %s" % (where, type(value).__name__))
    inner = getattr(field_type, '__args__', ())
    if len(inner) == 2 and inner[1] is Ellipsis:
        inner = (inner[0],) * len(value)
    elif inner and len(inner) != len(value):
        raise ConfigError("%s: expected %d values, got %d" % (where, len(inner), len(value)))
    if not inner:
        return tuple(value)
    items = []
    for i, (item_type, item) in enumerate(zip(inner, value)):
        item_where = "%s[%d]" % (where, i)
        if is_dataclass(item_type):
            items.append(strict_dataclass(item_type, item, item_where))
        else:
            items.append(_typed_value(item_type, item, item_where))
    return tuple(items)


def strict_dataclass(cls: Type[T], data: dict, what: Optional[str] = None) -> T:
    """
    Like deserialize_dataclass(), but any key that is not a field of the dataclass
    raises ConfigError listing the valid keys, and values must match the field annotations.
    Nested dataclass fields are decoded the same way. Lists are converted to tuples when the
    field is annotated as a tuple.

    :param cls: The dataclass to build
    :param data: Decoded JSON object
    :param what: Name used in error messages, defaults to the class name
    """
    what = what or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError("%s: expected a JSON object, got %s" % (what, type(data).__name__))

    field_types = get_type_hints(cls)
    valid = [f.name for f in fields(cls)]
    unknown = sorted(k for k in data.keys() if k not in valid)
    if unknown:
        raise ConfigError("%s: unknown key(s) %s. Valid keys are: %s" % (what, ", ".join(unknown), ", ".join(valid)))

    kwargs = {}
    for key, value in data.items():
        field_type = _unwrap_optional(field_types[key])
        where = "%s.%s" % (what, key)
        if value is None:
            kwargs[key] = None
        elif is_dataclass(field_type):
            kwargs[key] = strict_dataclass(field_type, value, where)
        elif isinstance(field_type, type) and issubclass(field_type, Enum):
            try:
                kwargs[key] = field_type(value)
            except ValueError as ex:
                raise ConfigError("%s: %s" % (where, ex))
        elif getattr(field_type, '__origin__', None) is tuple:
            kwargs[key] = _typed_tuple(field_type, value, where)
        else:
            kwargs[key] = _typed_value(field_type, value, where)
    try:
        return cls(**kwargs)
    except TypeError as ex:
        raise ConfigError("%s: %s" % (what, ex))


class Timing:
    """ Wall-clock stopwatch on the monotonic performance counter. All values are in seconds. """
    def __init__(self):
        self.t = time.perf_counter()

    def diff_now(self) -> float:
        return time.perf_counter() - self.t
