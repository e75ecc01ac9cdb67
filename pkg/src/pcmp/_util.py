"""Small shared helpers: atomic file writes and FNV-1a hashing."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numba
import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a(data, h):
    for b in data:
        h ^= np.uint64(b)
        h *= FNV_PRIME
    return h


class Fnv1a:
    """Incremental 64-bit FNV-1a."""

    def __init__(self):
        self.value = FNV_OFFSET

    def update(self, data) -> "Fnv1a":
        if isinstance(data, str):
            data = data.encode("utf-8")
        if isinstance(data, np.ndarray):
            buf = np.ascontiguousarray(data).view(np.uint8).ravel()
        else:
            buf = np.frombuffer(bytes(data), dtype=np.uint8)
        if len(buf):
            self.value = _fnv1a(buf, np.uint64(self.value))
        return self

    def hexdigest(self) -> str:
        return f"{int(self.value):016x}"


def fnv1a64(data) -> str:
    return Fnv1a().update(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, doc) -> None:
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))
