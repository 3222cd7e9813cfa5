"""Small shared helpers: atomic file writes and named RNG substreams."""

from __future__ import annotations

import os
import tempfile
import zlib

import numpy as np


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file + rename so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible RNG stream derived from (seed, label)."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
