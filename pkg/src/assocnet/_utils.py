"""Shared helpers: named RNG substreams and atomic file writes."""

from __future__ import annotations

import json
import os
import tempfile
import zlib

import numpy as np


def substream(seed: int, *tags) -> np.random.Generator:
    """Return a Generator on a named substream of the master seed.

    Streams are independent for distinct tag tuples and reproducible across
    runs and platforms (tags are hashed with crc32, not Python hash()).
    """
    key = [zlib.crc32(str(t).encode("utf8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def atomic_write_text(path, text: str) -> None:
    """Write text to `path` via a temp file + rename in the same directory."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj, indent: int = 2) -> None:
    atomic_write_text(path, json.dumps(obj, indent=indent, sort_keys=True) + "\n")


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float."""
    if x != x:  # NaN
        return "nan"
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(float(x))
