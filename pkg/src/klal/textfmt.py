"""Flat ``key=value`` text used for configs and reports.

One pair per line, keys in a fixed order, floats written with ``repr`` so
they read back exactly.  Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from typing import Mapping


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_kv(pairs: Mapping) -> str:
    lines = []
    for k, v in pairs.items():
        text = _fmt(v)
        if "\n" in text or "=" in str(k):
            raise ValueError(f"cannot encode {k!r}={text!r} on one line")
        lines.append(f"{k}={text}")
    return "\n".join(lines) + "\n"


def load_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
