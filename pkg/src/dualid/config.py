"""``key = value`` configuration files mapped onto dataclasses.

Lines are ``key = value``; ``#`` and ``;`` start comments.  Values are
coerced to the annotated field type of the target dataclass.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .base import ValidationError

_SECTION = "config"


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def parse_kv(text: str) -> dict[str, str]:
    """Parse key=value text into raw strings."""
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ValidationError(f"bad config: {exc}") from None
    return dict(parser[_SECTION])


def _coerce(value: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.strip().lower() in ("none", "null", ""):
            return None
        return _coerce(value, args[0])
    if typ is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, float, str):
        return typ(value.strip())
    if origin in (tuple, list):
        (inner, *_) = typing.get_args(typ) or (str,)
        items = [v for v in value.replace(",", " ").split() if v]
        return origin(_coerce(v, inner) for v in items)
    return value


def apply_overrides(cfg, values: dict):
    """Return a copy of dataclass ``cfg`` with string or typed ``values`` applied."""
    hints = typing.get_type_hints(type(cfg))
    names = {f.name for f in dataclasses.fields(cfg)}
    updates = {}
    for key, raw in values.items():
        if raw is None:
            continue
        key = key.replace("-", "_")
        if key not in names:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(raw, hints[key]) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config key {key!r}: {exc}") from None
    return dataclasses.replace(cfg, **updates)


def load_config(path, cls):
    return apply_overrides(cls(), read_kv(path))


def dump_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, (tuple, list)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
