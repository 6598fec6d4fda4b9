"""Checkpoints: a JSON manifest next to a raw little-endian float64 blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError

FORMAT = "dpmoe-checkpoint"
VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> Path:
    """Write ``<path>`` (manifest) and ``<path stem>.bin`` (blob); tensors in dict order."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
            offset += data.nbytes
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "blob": blob_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=False), encoding="utf-8")
    return path


def load_checkpoint(path):
    """Return ``(params, meta)``; values round-trip bit-exactly."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("dtype") != "float64" or manifest.get("byte_order") != "little":
        raise ValueError(f"{path}: unsupported dtype/byte order")
    raw = (path.parent / manifest["blob"]).read_bytes()
    params = {}
    for ent in manifest["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        if start + n > len(raw):
            raise ShapeError(f"{ent['name']}: blob is truncated")
        arr = np.frombuffer(raw[start:start + n], dtype="<f8").astype(np.float64)
        params[ent["name"]] = arr.reshape(ent["shape"])
    return params, manifest.get("meta", {})
