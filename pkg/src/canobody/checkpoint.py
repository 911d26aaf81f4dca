"""Binary checkpoint files.

Layout: the 8-byte magic ``IAKCKPT1``, a little-endian u32 byte length,
a UTF-8 JSON manifest of that length, then the raw parameter blobs.
The manifest lists one entry per tensor (name, shape, dtype, byte
offset into the blob section) plus an optional ``extra`` dict for
configuration provenance. Save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IAKCKPT1"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], extra: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = _DTYPE_NAMES.get(arr.dtype)
        if dt is None:
            arr = arr.astype(np.float32)
            dt = "f32"
        blob = arr.astype(_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"tensors": entries, "extra": extra or {}}
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    blob_base = start + mlen
    tensors = {}
    for ent in manifest["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        off = blob_base + ent["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off)
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return tensors, manifest.get("extra", {})
