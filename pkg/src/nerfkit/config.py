"""Flat, typed `key = value` configuration files.

    # comment
    grid.levels = 12
    background = 1, 1, 1

Keys are dotted paths. A schema maps each key (or a regex for indexed keys
such as `sphere.0.radius`) to a type and optional default; unknown keys and
bad values raise `ValidationError` naming the key path.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ParseError, ValidationError

_LINE = re.compile(r"^([A-Za-z_][\w.]*)\s*=\s*(.*)$")


def parse_pairs(text: str, path=None) -> dict[str, tuple[str, int]]:
    """Raw key -> (value string, line number). Later duplicates are an error."""
    out: dict[str, tuple[str, int]] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        m = _LINE.match(body)
        if not m:
            raise ParseError(f"expected 'key = value', got {line.strip()!r}", n, path)
        key, value = m.group(1), m.group(2).strip()
        if key in out:
            raise ParseError(f"duplicate key {key!r}", n, path)
        out[key] = (value, n)
    return out


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    s = s.strip().strip("[]()")
    if not s:
        return ()
    return tuple(float(p) for p in re.split(r"[,\s]+", s) if p)


def _ints(s: str) -> tuple:
    return tuple(int(round(v)) if float(v).is_integer() else _not_int(v) for v in _floats(s))


def _not_int(v):
    raise ValueError(f"{v} is not an integer")


def _int(s: str) -> int:
    # allow 2**19 style powers, which read better for table sizes
    m = re.fullmatch(r"\s*(\d+)\s*\*\*\s*(\d+)\s*", s)
    if m:
        return int(m.group(1)) ** int(m.group(2))
    return int(s)


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": _int,
    "float": float,
    "bool": _bool,
    "str": str,
    "floats": _floats,
    "ints": _ints,
}


@dataclass
class Key:
    type: str
    default: Any = None
    check: Callable[[Any], bool] | None = None
    hint: str = ""


class Schema:
    def __init__(self, keys: dict[str, Key], patterns: dict[str, Key] | None = None):
        self.keys = keys
        self.patterns = {re.compile(p + "$"): k for p, k in (patterns or {}).items()}

    def lookup(self, key: str) -> Key | None:
        if key in self.keys:
            return self.keys[key]
        for rx, spec in self.patterns.items():
            if rx.match(key):
                return spec
        return None

    def parse(self, text: str, path=None, overrides: dict | None = None) -> dict:
        values = {k: v.default for k, v in self.keys.items()}
        raw = parse_pairs(text, path)
        for key, (value, _line) in raw.items():
            values[key] = self.coerce(key, value)
        for key, value in (overrides or {}).items():
            values[key] = self.coerce(key, value) if isinstance(value, str) else self.check(key, value)
        return values

    def coerce(self, key: str, value: str):
        spec = self.lookup(key)
        if spec is None:
            raise ValidationError(key, "unknown key")
        try:
            parsed = PARSERS[spec.type](value)
        except ValueError as exc:
            raise ValidationError(key, f"expected {spec.type}: {exc}") from None
        return self.check(key, parsed)

    def check(self, key: str, value):
        spec = self.lookup(key)
        if spec is None:
            raise ValidationError(key, "unknown key")
        if spec.check is not None and not spec.check(value):
            raise ValidationError(key, f"invalid value {value!r}" + (f" ({spec.hint})" if spec.hint else ""))
        return value

    def load(self, path, overrides=None) -> dict:
        return self.parse(Path(path).read_text(), str(path), overrides)


def dump(values: dict) -> str:
    """Render values back into the file format (used to echo effective configs)."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if v is None:
            continue
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, (tuple, list)):
            s = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def positive(v) -> bool:
    return v > 0


def non_negative(v) -> bool:
    return v >= 0


def vec3(v) -> bool:
    return len(v) == 3


def unit_range3(v) -> bool:
    return len(v) == 3 and all(0.0 <= x <= 1.0 for x in v)
