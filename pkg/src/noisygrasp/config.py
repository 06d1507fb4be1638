"""Flat key/value config files.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines
ignored. Keys are dotted to address a section, e.g. ``world.seed = 3``,
``train.batch_size = 64``, ``model.n_bins = 18``. Values are coerced to the
type of the dataclass field they override, so a typo'd key or a malformed
value fails loudly instead of training with a silently-ignored setting.
"""

from __future__ import annotations

import dataclasses
import re

from .errors import InvalidInputError

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def parse_value(raw: str):
    """Best-effort scalar parse: bool, int, float, comma list, else string."""
    s = raw.strip()
    if "," in s:
        return tuple(parse_value(part) for part in s.split(","))
    low = s.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        return s[1:-1]
    return s


def load_config(path) -> dict:
    """Parse a config file into an ordered {dotted_key: parsed_value} dict."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if "#" in line:
                line = line.split("#", 1)[0]
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(
                    f"{path}:{lineno}: expected 'key = value', got {line!r}"
                )
            key, raw = line.split("=", 1)
            key = key.strip()
            if not _KEY_RE.match(key):
                raise InvalidInputError(f"{path}:{lineno}: bad key {key!r}")
            out[key] = parse_value(raw)
    return out


def _coerce(current, value, key: str):
    """Coerce a parsed value to the type of the field's current value."""
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise InvalidInputError(f"{key}: expected true/false, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise InvalidInputError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        items = value if isinstance(value, tuple) else (value,)
        if current:
            items = tuple(_coerce(current[0], v, key) for v in items)
        return tuple(items)
    if isinstance(current, str):
        return str(value)
    return value


def apply_config(instance, mapping: dict, prefix: str = ""):
    """Return a copy of a dataclass instance with the config's ``prefix.*``
    keys applied. Unknown field names are errors."""
    field_names = {f.name for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in mapping.items():
        if prefix:
            if not key.startswith(prefix + "."):
                continue
            name = key[len(prefix) + 1:]
        else:
            name = key
        if "." in name:
            if not prefix:
                continue
            raise InvalidInputError(f"nested key {key!r} not supported under {prefix!r}")
        if name not in field_names:
            raise InvalidInputError(
                f"unknown {type(instance).__name__} field {name!r} (from key {key!r})"
            )
        updates[name] = _coerce(getattr(instance, name), value, key)
    return dataclasses.replace(instance, **updates) if updates else instance


def config_sections(mapping: dict) -> set:
    return {k.split(".", 1)[0] for k in mapping if "." in k}
