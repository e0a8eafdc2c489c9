"""Deterministic seed derivation.

Python's builtin hash() is salted per process, so derived seeds go through
sha256 to stay stable across runs, platforms, and interpreter versions.
"""

from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def mix_seed(base: int, *tokens: object) -> int:
    """Derive a child seed from a base seed and a label tuple.

    The same (base, tokens) pair always yields the same value; distinct
    token tuples yield (with overwhelming probability) distinct values.
    Result is a non-negative int usable with numpy's default_rng.
    """
    text = "|".join(str(t) for t in tokens)
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return (int(base) ^ int.from_bytes(digest[:8], "little")) & _MASK
