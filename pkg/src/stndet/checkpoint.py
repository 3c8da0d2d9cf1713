"""Checkpoint container: JSON header followed by raw little-endian tensor bytes.

Layout::

    b"STNDCKPT"            8-byte magic
    uint64 (LE)            header length in bytes
    header                 UTF-8 JSON
    payload                tensors, concatenated in header order

Header fields: ``format_version``, ``tensors`` (name, shape, dtype, offset,
nbytes; offsets are relative to the payload start) and a free-form ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STNDCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr).copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"]))
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header.get("meta", {})
