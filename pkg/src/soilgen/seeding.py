"""Deterministic seed fan-out and config digests.

A single master seed is expanded into per-component seeds by stable
hashing, so adding a new component never perturbs the randomness of an
existing one.
"""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *names) -> int:
    """Derive a sub-seed from the master seed and a component name path."""
    text = ":".join([str(int(master_seed)), *map(str, names)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stable_digest(mapping: dict) -> str:
    """Order-independent hex digest of a flat key/value mapping."""
    lines = sorted(f"{k}={mapping[k]}" for k in mapping)
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]
