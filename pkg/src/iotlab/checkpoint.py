"""Binary checkpoint container.

Layout::

    b"IOTCKPT1"                      8 bytes magic
    metadata length                  uint64, little-endian
    metadata                         UTF-8 JSON (configs, history, tensor manifest)
    payload                          float32 little-endian blocks in manifest order

Manifest entries carry ``name``, ``shape``, ``offset`` (bytes, relative to the
payload start) and ``count`` (elements).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"IOTCKPT1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: Optional[dict] = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = dict(meta or {})
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = manifest
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, metadata)``; arrays keep manifest order."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + _LEN.size or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an IOT checkpoint (bad magic)")
    (meta_len,) = _LEN.unpack_from(blob, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + meta_len > len(blob):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(blob[start : start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    payload = blob[start + meta_len :]
    arrays = {}
    for entry in meta.get("tensors", []):
        shape = tuple(entry["shape"])
        count, offset = int(entry["count"]), int(entry["offset"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{path}: manifest shape/count mismatch for {entry['name']}")
        if offset < 0 or offset + 4 * count > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return arrays, meta
