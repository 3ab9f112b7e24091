"""Stable serialization helpers.

All file outputs of the toolchain must be byte-identical across runs with
the same inputs and seed, so everything funnels through these helpers: no
timestamps, no locale, no hash-order leakage, floats via `repr` (shortest
round-trip form, so reading a trace back reproduces the exact float).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

__all__ = [
    "fmt_num",
    "dumps_stable",
    "write_text_atomic",
    "sha256_file",
    "sha256_bytes",
]


def fmt_num(x: float | int) -> str:
    """Canonical text for a number: integral floats lose the trailing .0."""
    if isinstance(x, bool):
        raise TypeError("bool is not a quantity")
    if isinstance(x, int):
        return str(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def dumps_stable(obj: Any, *, indent: int | None = None) -> str:
    """JSON text with stable layout. Dict insertion order is the contract:
    callers build dicts in the field order they want on disk."""
    if indent is None:
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)
    return json.dumps(obj, indent=indent, ensure_ascii=False)


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file + rename so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())
