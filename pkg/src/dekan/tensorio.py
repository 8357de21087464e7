"""Raw tensor files and JSON manifests for on-disk artifacts.

Arrays are stored as raw little-endian buffers (float32 or int64) next to a
manifest that records shapes and dtypes, so artifacts stay readable without
pickle and byte-identical across runs.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import PersistenceError

_DTYPES = {"float32": "<f4", "int64": "<i8"}


def save_array(path: Path, arr: np.ndarray) -> dict:
    """Write a raw array file and return its manifest entry."""
    if arr.dtype == np.float32:
        dtype = "float32"
    elif arr.dtype == np.int64:
        dtype = "int64"
    else:
        raise PersistenceError(f"unsupported artifact dtype {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
    path.write_bytes(buf)
    return {
        "file": path.name,
        "dtype": dtype,
        "shape": list(arr.shape),
        "sha256": hashlib.sha256(buf).hexdigest(),
    }


def load_array(path: Path, entry: dict) -> np.ndarray:
    """Read a raw array back; verifies size and checksum from the manifest."""
    path = Path(path)
    if not path.is_file():
        raise PersistenceError(f"missing artifact file {path}")
    buf = path.read_bytes()
    dtype = entry.get("dtype")
    if dtype not in _DTYPES:
        raise PersistenceError(f"manifest for {path} has unknown dtype {dtype!r}")
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape)) * np.dtype(_DTYPES[dtype]).itemsize
    if len(buf) != expected:
        raise PersistenceError(
            f"{path} holds {len(buf)} bytes, manifest says {expected}"
        )
    digest = entry.get("sha256")
    if digest is not None and hashlib.sha256(buf).hexdigest() != digest:
        raise PersistenceError(f"checksum mismatch for {path}")
    return np.frombuffer(buf, dtype=_DTYPES[dtype]).reshape(shape).copy()


def write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise PersistenceError(f"missing manifest {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise PersistenceError(f"corrupt manifest {path}: {e}") from e


def config_digest(payload) -> str:
    """Stable digest of a JSON-serializable description. Keys are sorted so
    logically equal configs always hash equal."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
