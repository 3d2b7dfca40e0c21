"""Flat binary checkpoints of named tensors.

Layout: 8-byte magic, ``<I`` version, ``<Q`` header length, a UTF-8 JSON
header ``{"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}]}``,
then the raw little-endian tensor bytes. Offsets are relative to the start of
the data section.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DomainError

MAGIC = b"UHSTUCK\x00"
VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise DomainError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    start = 20
    header = json.loads(raw[start : start + hlen])
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"])
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return tensors, header["meta"]
