"""Binary checkpoint container.

Layout::

    b"QRLCKPT1"
    uint32 little-endian   manifest byte length
    manifest               UTF-8 JSON: version, kind, meta, entries[(name, shape, dtype)]
    payload                raw little-endian values of every entry, in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"QRLCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    chunks = []
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    manifest = json.dumps(
        {"version": ckpt.version, "kind": ckpt.kind, "meta": ckpt.meta, "entries": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (length,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12:12 + length].decode("utf-8"))
    if manifest["version"] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest['version']}")
    if expect_kind is not None and manifest["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {manifest['kind']}")
    offset = 12 + length
    arrays = {}
    for entry in manifest["entries"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"])
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return Checkpoint(kind=manifest["kind"], arrays=arrays, meta=manifest["meta"], version=manifest["version"])
