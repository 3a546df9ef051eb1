"""Derivation of per-component seeds from a single experiment seed.

Each stage (split, augmentation, weight init, shuffle, ...) gets its own
seed so any one of them can be reproduced in isolation. The derived seed is
the first four bytes of ``sha256(f"{seed}:{component}")`` read big-endian
and masked to 31 bits.
"""

from __future__ import annotations

import hashlib
import json

PIPELINE_VERSION = 1


def derive_seed(seed: int, component: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def provenance(seed: int, config) -> dict:
    return {
        "seed": int(seed),
        "config_hash": config_hash(config),
        "pipeline_version": PIPELINE_VERSION,
    }
