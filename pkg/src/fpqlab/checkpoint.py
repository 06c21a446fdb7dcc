"""Binary checkpoint container.

Layout (all integers little-endian)::

    u8      format version
    4 bytes magic b"FPQK"
    u32     index length in bytes
    index   UTF-8 JSON: {"entries": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    payload raw little-endian array bytes, concatenated in index order

Arrays round-trip bit-exactly. ``meta`` carries everything that is not an
array (config, epoch, RNG states).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"FPQK"
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int):
        super().__init__(f"checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")
        self.found = found


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    index = json.dumps({"entries": entries, "meta": ckpt.meta}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(index)))
        fh.write(index)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 9:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    version = buf[0]
    if buf[1:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[1:5]!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)
    (n,) = struct.unpack_from("<I", buf, 5)
    header = json.loads(buf[9 : 9 + n].decode())
    base = 9 + n
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        raw = buf[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: entry {e['name']} truncated at byte {start + len(raw)}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return Checkpoint(arrays, header["meta"])
