"""Deterministic seed fan-out.

All randomness in the package flows from one root seed.  Subsystems get
their own streams via :func:`derive_seed`, which mixes the root seed with
string/int tags through SHA-256, so adding a new consumer never perturbs
existing streams.
"""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *tags: str | int) -> int:
    """Stable 64-bit seed derived from ``root`` and a tag path."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode("utf-8"))
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
