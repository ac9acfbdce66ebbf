"""Stable derivation of per-component seeds from one experiment seed."""

import hashlib


def derive_seed(base: int, tag: str) -> int:
    """Deterministic 63-bit child seed for a named component."""
    digest = hashlib.sha256(f"{base}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
