"""Single-file tensor checkpoints.

Layout::

    8 bytes   magic  b"DFAMCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   manifest length N, uint64 little-endian
    N bytes   manifest, UTF-8 JSON
    ...       payload: raw little-endian IEEE-754 arrays, back to back

The manifest is ``{"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}],
"meta": {...}}`` where ``offset`` counts from the start of the payload and
``dtype`` is ``"<f4"``, ``"<f8"`` or ``"<i8"``.  ``meta`` carries non-tensor
state (epoch, optimizer step, config snapshot).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFAMCKPT"
FORMAT_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8"}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    manifest = json.loads(raw[20:20 + mlen])
    base = 20 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=e["dtype"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, manifest["meta"]
