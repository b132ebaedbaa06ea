"""Flat binary checkpoints.

Layout::

    b"DSDFCKPT"            8-byte magic
    uint64 (little)        header length in bytes
    header                 UTF-8 JSON: {"params": [{name, shape, offset}], "meta": {...}}
    payload                little-endian float64, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DSDFCKPT"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"params": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in chunks:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    payload = memoryview(raw)[16 + hlen :]
    arrays = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(payload[start : start + 8 * n], dtype="<f8").astype(np.float64)
        arrays[e["name"]] = arr.reshape(e["shape"])
    return arrays, header.get("meta", {})
