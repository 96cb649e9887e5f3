"""Weight checkpoint format.

Layout (all integers little-endian)::

    b"DLTDOA-CKPT\\n"          magic
    uint32 N                    header length in bytes
    N bytes                     UTF-8 JSON header
    raw tensor data             concatenated, row-major

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype",
"offset", "nbytes"}, ...]}`` with offsets relative to the start of the data
block. Output is byte-for-byte deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLTDOA-CKPT\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        dtype = a.dtype.newbyteorder("<")
        raw = a.astype(dtype).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (n,) = struct.unpack("<I", data[pos : pos + 4])
    header = json.loads(data[pos + 4 : pos + 4 + n])
    base = pos + 4 + n
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]


def assign_parameters(target: dict[str, np.ndarray], source: dict[str, np.ndarray]) -> None:
    """Copy ``source`` into the live parameter arrays of ``target`` in place."""
    if set(target) != set(source):
        missing = sorted(set(target) ^ set(source))
        raise CheckpointError(f"parameter names differ: {missing[:5]}")
    for k, arr in target.items():
        if arr.shape != source[k].shape:
            raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {source[k].shape}")
        arr[...] = source[k]
