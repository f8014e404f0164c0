"""Keyed seed derivation and content hashes used for provenance."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


def derive_seed(root_seed: int, *keys) -> int:
    """Deterministic 31-bit seed for a named stage (and optional sub-keys)."""
    text = ":".join([str(int(root_seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
