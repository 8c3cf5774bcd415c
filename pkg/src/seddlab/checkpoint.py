"""Checkpoint format: length-prefixed JSON header + raw float32 payloads.

Layout: 8-byte little-endian header length, the UTF-8 JSON header (with the
tensor manifest in payload order), then each tensor as little-endian
float32 bytes. Loading is bit-exact for float32 sources.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, meta: dict, named_arrays: dict[str, np.ndarray]) -> None:
    tensors = [{"name": name, "shape": list(arr.shape)} for name, arr in named_arrays.items()]
    header = {"format": "seddlab-ckpt-v1", "meta": meta, "tensors": tensors}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in named_arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError("file too short for a header length prefix")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError("header length prefix exceeds file size")
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != "seddlab-ckpt-v1":
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")
    payload = raw[8 + hlen:]
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"]) * 4
    if len(payload) != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest declares {expected}")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += size * 4
    return header["meta"], arrays
