"""Deterministic seed derivation.

Every random stream in a run is derived from one master seed plus a list
of string/int labels, so two runs with the same config and seed are
bit-identical and no component ever touches ambient RNG state.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 64-bit seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")
