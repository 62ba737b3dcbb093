"""Sectioned ``key = value`` configuration text.

``[section]`` headers, ``#`` comments, UTF-8.  Parsing is strict: duplicate
sections or keys and keys unknown to the target dataclass are errors.
"""

from __future__ import annotations

import configparser
import dataclasses

from ldelab.errors import ArgumentError, FormatError


def parse(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   strict=True, interpolation=None, default_section="\x00none")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"config: {exc}".splitlines()[0]) from None
    return {name: dict(cp[name]) for name in cp.sections()}


def format_sections(sections: dict[str, dict[str, object]]) -> str:
    lines = []
    for name, items in sections.items():
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for key, value in items.items():
            lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ArgumentError(f"config key {key!r}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(text: str, like, key: str = "?"):
    if isinstance(like, tuple):
        elem = like[0] if like else 0
        return tuple(_parse_scalar(t, elem, key) for t in text.split(",") if t.strip())
    return _parse_scalar(text, like, key)


def to_section(obj) -> dict[str, object]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def from_section(cls, section: dict[str, str], base=None, where: str = ""):
    """Build dataclass ``cls`` from string values, starting from ``base`` (or defaults)."""
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ArgumentError(f"unknown config key(s) {unknown} in [{where or cls.__name__}]")
    updates = {k: parse_value(v, getattr(base, k), k) for k, v in section.items()}
    return dataclasses.replace(base, **updates)
