"""Deterministic seed derivation. One root seed fans out into named substreams."""
from __future__ import annotations

import hashlib


def derive_seed(root: int, *parts) -> int:
    """Derive a child seed from a root seed and a path of names/indices.

    Collision-resistant (sha256) and stable across platforms and runs, so
    every stage of the pipeline can own an independent RNG stream.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    # keep it positive and inside torch.Generator.manual_seed's int64 range
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
