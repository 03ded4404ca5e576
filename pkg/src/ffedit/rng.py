"""Seed derivation: every component stream is split from one root seed by label."""
from __future__ import annotations

import hashlib


def derive_seed(root: int, *labels) -> int:
    h = hashlib.sha256(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
