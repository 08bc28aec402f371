"""Lenient JSON extraction from model output."""

from __future__ import annotations

import json
import re
from typing import Any

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.DOTALL)


class NoJsonFound(ValueError):
    pass


def _strip_trailing_commas(text: str) -> str:
    out = []
    in_str = False
    esc = False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_str:
            out.append(ch)
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            out.append(ch)
        elif ch == ",":
            j = i + 1
            while j < len(text) and text[j] in " \t\r\n":
                j += 1
            if j < len(text) and text[j] in "}]":
                i += 1
                continue
            out.append(ch)
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def loads_lenient(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return json.loads(_strip_trailing_commas(text))


def _balanced_end(text: str, start: int) -> int:
    """Index just past the bracket matching ``text[start]``, or -1."""
    depth = 0
    in_str = False
    esc = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
            if depth == 0:
                return i + 1
    return -1


def _scan(text: str, opener: str) -> Any:
    pos = text.find(opener)
    while pos >= 0:
        end = _balanced_end(text, pos)
        if end > 0:
            try:
                return loads_lenient(text[pos:end])
            except json.JSONDecodeError:
                pass
        pos = text.find(opener, pos + 1)
    raise NoJsonFound


def extract_json(text: str) -> Any:
    """Return the first JSON object (or array) embedded in ``text``.

    Fenced code blocks are tried first, then the whole text, then a scan for
    balanced braces and finally brackets. Trailing commas are tolerated.
    """
    if not isinstance(text, str):
        raise NoJsonFound("not text")
    for m in _FENCE.finditer(text):
        try:
            value = loads_lenient(m.group(2).strip())
        except json.JSONDecodeError:
            continue
        if isinstance(value, (dict, list)):
            return value
    stripped = text.strip()
    if stripped:
        try:
            return loads_lenient(stripped)
        except json.JSONDecodeError:
            pass
    for opener in "{[":
        try:
            return _scan(text, opener)
        except NoJsonFound:
            continue
    raise NoJsonFound(f"no JSON found in {text[:80]!r}")
