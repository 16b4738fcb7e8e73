"""Binary tensor-container checkpoints shared by every model in the package.

Layout (little-endian throughout):

    magic b"PLTC" | version u32 | header_len u32 | header JSON (UTF-8)
    | raw tensor payloads, C-order, in header order
    | prov_len u32 | provenance JSON (UTF-8)

The header lists named tensors with dtype ("f32"/"f64") and shape, plus an
arbitrary "meta" object for small structured state (arch configs, tree
models). Provenance travels last so tooling can rewrite it without touching
payload offsets.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .util import atomic_write_bytes

MAGIC = b"PLTC"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CheckpointError(Exception):
    """Base class for container failures."""


class FormatError(CheckpointError):
    """Bad magic bytes or undecodable structure."""


class VersionError(CheckpointError):
    """Container version not supported by this build."""


class TruncatedError(CheckpointError):
    """File ends before the declared content does."""


class HeaderMismatchError(CheckpointError):
    """Declared tensor shapes disagree with the payload bytes present."""


def save_container(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
                   provenance: dict | None = None) -> None:
    """Serialize named float tensors plus metadata; write is atomic."""
    specs = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        specs.append({"name": name, "dtype": _DTYPE_NAMES[arr.dtype], "shape": list(arr.shape)})
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = json.dumps({"tensors": specs, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    prov = json.dumps(provenance or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(header)),
        header,
        *payloads,
        struct.pack("<I", len(prov)),
        prov,
    ])
    atomic_write_bytes(path, blob)


def load_container(path):
    """Read a container back as (tensors dict, meta dict, provenance dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {pos})")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes: not a PLTC container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    (header_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for spec in header.get("tensors", []):
        name, dtype_name, shape = spec["name"], spec["dtype"], tuple(spec["shape"])
        if dtype_name not in _DTYPES:
            raise FormatError(f"tensor {name!r} declares unknown dtype {dtype_name!r}")
        dtype = _DTYPES[dtype_name]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = take(nbytes, f"tensor {name!r} payload")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    (prov_len,) = struct.unpack("<I", take(4, "provenance length"))
    prov_raw = take(prov_len, "provenance")
    if pos != len(data):
        raise HeaderMismatchError(
            f"{len(data) - pos} trailing bytes: header shapes disagree with payload")
    try:
        provenance = json.loads(prov_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"provenance is not valid JSON: {exc}") from exc
    return tensors, header.get("meta", {}), provenance
