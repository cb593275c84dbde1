"""Tensor archive: one compact JSON manifest line, then a little-endian payload.

The manifest records ``{name, dtype, shape, offset, length}`` per tensor and the
total payload length, which loading checks against the bytes actually present.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = "fqdet-archive"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


class ArchiveError(ValueError):
    pass


def save_archive(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {key} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": MAGIC, "version": 1, "payload_length": offset, "tensors": entries, "meta": meta or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode() + b"\n")
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        head = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive")
    if len(payload) != manifest["payload_length"]:
        raise ArchiveError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_length']}")
    out = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["length"]
        if end > len(payload):
            raise ArchiveError(f"{path}: tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=_DTYPES[e["dtype"]])
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return out, manifest.get("meta", {})
