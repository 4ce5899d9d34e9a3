"""On-disk checkpoint format shared by backbone snapshots and prefix banks.

A checkpoint is a single JSON document:

    {"format_version": 1, "kind": "backbone" | "prefix",
     "config": {...model config fields...}, "seed": int, "provenance": str,
     "tensors": [{"name", "shape", "dtype": "f32",
                  "data": base64(little-endian float32)}]}

Writing is canonical (fixed key order, two-space indent, trailing newline),
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CompatibilityError

FORMAT_VERSION = 1


def stable_fingerprint(obj) -> str:
    """sha256 over the canonical JSON encoding of a config-like object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def params_digest(named_arrays) -> str:
    """sha256 over parameter names and little-endian float32 bytes, in order."""
    h = hashlib.sha256()
    for name, arr in named_arrays:
        h.update(name.encode("utf-8"))
        h.update(np.asarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def _tensor_record(name: str, arr: np.ndarray) -> dict:
    flat = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "name": name,
        "shape": list(arr.shape),
        "dtype": "f32",
        "data": base64.b64encode(flat.tobytes()).decode("ascii"),
    }


def _decode_tensor(record: dict) -> tuple[str, np.ndarray]:
    if record.get("dtype") != "f32":
        raise CompatibilityError(f"unsupported tensor dtype {record.get('dtype')!r}")
    raw = base64.b64decode(record["data"])
    arr = np.frombuffer(raw, dtype="<f4").reshape(record["shape"]).copy()
    return record["name"], arr


def write_checkpoint(path, kind: str, config: dict, seed: int, provenance: str,
                     named_arrays) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "seed": int(seed),
        "provenance": provenance,
        "tensors": [_tensor_record(name, arr) for name, arr in named_arrays],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_checkpoint(path, expect_kind: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: format_version {doc.get('format_version')} != {FORMAT_VERSION}"
        )
    if expect_kind is not None and doc.get("kind") != expect_kind:
        raise CompatibilityError(f"{path}: kind {doc.get('kind')!r}, expected {expect_kind!r}")
    doc["tensors"] = [_decode_tensor(rec) for rec in doc["tensors"]]
    return doc
