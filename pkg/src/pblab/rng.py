"""Seed derivation on top of the counter-based Philox generator.

Every random stream in the package comes from :func:`make_rng` with an
explicit key path, so runs are reproducible across platforms and independent
streams never share state.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64"


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*keys) -> np.random.Generator:
    """Generator keyed by a path such as ``(seed, "shadow", 3)``."""
    seq = np.random.SeedSequence([_key_int(k) for k in keys] or [0])
    return np.random.Generator(np.random.Philox(seq))


def child_seed(*keys) -> int:
    seq = np.random.SeedSequence([_key_int(k) for k in keys] or [0])
    return int(seq.generate_state(1, np.uint64)[0] >> 1)
