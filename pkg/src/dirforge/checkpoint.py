"""Binary checkpoint container shared by models, encoders and directions.

Layout (all integers little-endian)::

    b"GTFW" | u32 format version | u64 header length | header (UTF-8 JSON)
    | payload: float32 arrays, in header order

The header lists ``tensors`` as ``{"name", "shape", "dtype": "float32",
"nbytes"}`` entries plus free-form metadata.  JSON is written with sorted keys and fixed
separators so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GTFW"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """Base class for unreadable checkpoint files."""


class TruncatedCheckpointError(CheckpointError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class PayloadMismatchError(CheckpointError):
    """Header-declared shapes disagree with the payload bytes."""

    def __init__(self, tensor: str, message: str):
        self.tensor = tensor
        super().__init__(f"tensor {tensor!r}: {message}")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "nbytes": arr.size * 4})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = dict(meta or {})
    header["tensors"] = entries
    hbytes = dumps_json(header).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file is {len(buf)} bytes, shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, reader supports {VERSION}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedCheckpointError("header extends past end of file")
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    entries = header.get("tensors", [])
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != "float32":
            raise PayloadMismatchError(name, f"unsupported dtype {entry.get('dtype')!r}")
        expect = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != expect:
            raise PayloadMismatchError(name, f"shape {list(shape)} needs {expect} bytes, payload holds {entry['nbytes']}")
    total = sum(e["nbytes"] for e in entries)
    if offset + total > len(buf):
        raise TruncatedCheckpointError(f"payload needs {total} bytes, {len(buf) - offset} present")
    if offset + total < len(buf):
        raise PayloadMismatchError(entries[-1]["name"] if entries else "<none>", f"{len(buf) - offset - total} unexpected trailing bytes")
    out: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        arr = np.frombuffer(buf, dtype="<f4", count=entry["nbytes"] // 4, offset=offset)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += entry["nbytes"]
    return out, header


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, meta))
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
