"""Self-describing tensor container: JSON header + little-endian data blocks.

Layout::

    b"DMTLTNS1" | uint64 LE header length | UTF-8 JSON header | raw blocks

The header holds free-form ``meta`` plus, per tensor, its name, dtype, shape
and byte offset into the block area. Files are byte-deterministic for equal
inputs (sorted JSON keys, no timestamps).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMTLTNS1"
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class TensorFileError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    raise TensorFileError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blocks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blocks)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write the container and return its sha256 hex digest."""
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
