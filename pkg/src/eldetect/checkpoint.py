"""Checkpoint container for named float64 tensors.

Layout (all integers little-endian)::

    b"ELDCKPT\\n"                 8-byte magic
    uint64 header_length
    header                        UTF-8 JSON, keys sorted:
                                  {"format_version": 1,
                                   "meta": {...},
                                   "tensors": [{"name", "shape", "offset"}, ...]}
    payload                       concatenated float64 LE values, row-major,
                                  at the byte offsets listed in the header

The writer emits tensors sorted by name and contains no timestamps, so the
same parameters and metadata always produce the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ELDCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
