"""Checkpoint persistence: JSON manifest plus one binary blob.

The manifest lists parameter names, shapes, byte offsets, and trainability
in a fixed order; the blob holds the concatenated little-endian float64
values in that same order.  Round trips are bit exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import UsageError
from .tensor import Parameter

FORMAT_TAG = "annocascade-checkpoint-v1"
_DTYPE = "<f8"


def save_checkpoint(stem: str | Path, params: list[Parameter],
                    meta: dict | None = None) -> tuple[Path, Path]:
    """Write <stem>.json and <stem>.bin; returns both paths."""
    stem = Path(stem)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise UsageError(f"checkpoint: duplicate parameter names {dupes}")

    entries = []
    chunks = []
    offset = 0
    for p in params:
        raw = np.ascontiguousarray(p.tensor.data, dtype=_DTYPE).tobytes()
        entries.append({
            "name": p.name,
            "shape": list(p.tensor.shape),
            "offset": offset,
            "trainable": p.trainable,
        })
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT_TAG,
        "dtype": _DTYPE,
        "total_bytes": offset,
        "params": entries,
        "meta": meta or {},
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as {name: float64 array} plus its meta dict."""
    stem = Path(stem)
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise UsageError(f"checkpoint: {stem}.json/.bin not found")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise UsageError(f"checkpoint: unknown format {manifest.get('format')!r}")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise UsageError(f"checkpoint: blob is {len(blob)} bytes, "
                         f"manifest says {manifest['total_bytes']}")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, manifest["meta"]


def load_into(stem: str | Path, params: list[Parameter]) -> dict:
    """Fill existing parameters from a checkpoint; shapes must match."""
    arrays, meta = load_checkpoint(stem)
    for p in params:
        if p.name not in arrays:
            raise UsageError(f"checkpoint: parameter {p.name!r} missing from {stem}")
        if arrays[p.name].shape != p.tensor.shape:
            raise UsageError(f"checkpoint: {p.name!r} has shape {arrays[p.name].shape}, "
                             f"model expects {p.tensor.shape}")
        p.tensor.data = np.ascontiguousarray(arrays[p.name])
        p.tensor.zero_grad()
    return meta


def checkpoint_digest(stem: str | Path) -> str:
    """SHA-256 over manifest and blob, for change detection."""
    stem = Path(stem)
    h = hashlib.sha256()
    h.update(stem.with_suffix(".json").read_bytes())
    h.update(stem.with_suffix(".bin").read_bytes())
    return h.hexdigest()
