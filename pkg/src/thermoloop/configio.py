"""Flat ``key = value`` config files and atomic output helpers.

One key per line, ``#`` starts a comment, blank lines ignored. Units are
documented in the comment column when a file is written by this package.
"""

from __future__ import annotations

import os
import tempfile


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse flat key=value text; raises ValueError naming the bad line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=path)


def format_kv(items: list[tuple[str, object, str]]) -> str:
    """Render (key, value, unit-comment) triples as config text."""
    width = max((len(k) for k, _, _ in items), default=0)
    lines = []
    for key, value, comment in items:
        line = f"{key.ljust(width)} = {value}"
        if comment:
            line += f"  # {comment}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def atomic_write_text(path: str, text: str) -> None:
    """Write text via a temp file + rename so failures leave no partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class AtomicTextFile:
    """Streaming variant of :func:`atomic_write_text` for large outputs."""

    def __init__(self, path: str):
        self.path = os.path.abspath(path)
        directory = os.path.dirname(self.path)
        os.makedirs(directory, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
        self._fh = os.fdopen(fd, "w", encoding="utf-8")

    def write(self, text: str) -> None:
        self._fh.write(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._fh.close()
        if exc_type is None:
            os.replace(self._tmp, self.path)
        elif os.path.exists(self._tmp):
            os.unlink(self._tmp)


def get_float(kv: dict[str, str], key: str, default: float) -> float:
    return float(kv[key]) if key in kv else default

def get_int(kv: dict[str, str], key: str, default: int) -> int:
    return int(kv[key]) if key in kv else default

def get_floats(kv: dict[str, str], key: str, default: tuple[float, ...]) -> tuple[float, ...]:
    if key not in kv:
        return default
    return tuple(float(tok) for tok in kv[key].split(",") if tok.strip())
