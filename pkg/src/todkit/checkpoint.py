"""Tensor checkpoint container.

File layout: 8-byte magic ``TODKCKP1``, a little-endian uint64 manifest
length, the UTF-8 JSON manifest, then the raw tensor payload. The manifest
carries arbitrary metadata plus per-tensor name/dtype/shape/offset/nbytes
(offsets relative to the payload start). Tensors are stored little-endian
so files interoperate across implementations.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TODKCKP1"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a todkit checkpoint (bad magic)")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for ent in manifest["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(ent["dtype"]))
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(
            arr.dtype.newbyteorder("="), copy=True)
    return tensors, manifest["meta"]
