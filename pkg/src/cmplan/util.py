"""Small shared helpers."""

import hashlib


def stable_hash64(text: str) -> int:
    """Deterministic 64-bit hash of a string (stable across processes)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
