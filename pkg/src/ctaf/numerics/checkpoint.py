"""Flat named-tensor checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"CTAFCKPT"
    bytes 8..11   uint32 format version (1)
    bytes 12..19  uint64 manifest length N
    next N bytes  UTF-8 JSON manifest
    remainder     raw '<f8' payload, tensors concatenated in manifest order

The manifest is ``{"version": 1, "dtype": "<f8", "meta": {...},
"tensors": [{"name", "shape", "offset", "count"}, ...]}`` with ``offset`` and
``count`` in float64 elements relative to the payload start. Tensors are
stored sorted by name and the JSON is written with sorted keys, so equal
parameters always produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CTAFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {"version": VERSION, "dtype": "<f8", "meta": dict(meta or {}), "tensors": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a CTAF checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(blob, dtype="<f8", offset=20 + hlen)
    params = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise CheckpointError(f"truncated payload for tensor {e['name']}")
        params[e["name"]] = chunk.astype(np.float64).reshape(tuple(e["shape"]))
    return params, manifest["meta"]


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    atomic_write_bytes(path, dumps(params, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
