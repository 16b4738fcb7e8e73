"""Shared plumbing: seeded RNG streams, hashing, atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

# Stream tags keep independent randomness consumers decoupled: each consumer
# derives its generator from (seed, tag, *indices), so adding or removing one
# consumer never shifts another's draws.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_MLM = 4
STREAM_HEAD = 5
STREAM_DATA = 6
STREAM_INFER = 7
STREAM_SPLIT = 8
STREAM_TREE = 9
STREAM_NEG = 10


def rng_stream(seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Deterministic generator for one (seed, tag, indices...) consumer."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), *map(int, indices)]))


def stable_text_key(text: str) -> int:
    """64-bit key of a string, stable across processes (unlike hash())."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via temp file + rename so readers never see partial artifacts."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
