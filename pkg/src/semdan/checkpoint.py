"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"SDANCKPT"
    uint32    format version (currently 1)
    uint64    header length H in bytes
    H bytes   UTF-8 JSON header: {"arrays": [{"name", "shape"}...], "meta": {...}}
    ...       float64 little-endian payload of each array, row-major, in header order

Everything needed to resume a run (network parameters, optimizer
velocities, prototype bank, RNG state, iteration counter) goes in the
arrays and the ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDANCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode())
    offset = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        arrays[entry["name"]] = arr
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return arrays, header["meta"]
