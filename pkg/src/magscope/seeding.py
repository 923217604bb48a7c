"""Deterministic RNG stream derivation.

All randomness in the pipeline flows from a master seed through named
sub-streams (per slide, per tree, per fold), so parallel and serial
execution draw identical values no matter the scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *tokens: object) -> int:
    """Collapse a master seed plus context tokens into a 64-bit stream seed."""
    h = hashlib.sha256()
    h.update(str(int(master) & _MASK64).encode())
    for tok in tokens:
        h.update(b"\x1f")
        h.update(str(tok).encode())
    return int.from_bytes(h.digest()[:8], "little")


def spawn_rng(master: int, *tokens: object) -> np.random.Generator:
    """Generator for the sub-stream named by ``tokens``."""
    return np.random.default_rng(derive_seed(master, *tokens))
