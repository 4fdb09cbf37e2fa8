"""Deterministic seed derivation.

All randomness in the pipeline flows from one root seed through named
substreams, so any component can be re-derived in isolation (resume,
parallel workers, per-slice masks) without shared mutable RNG state.
"""

import hashlib

import numpy as np

__all__ = ["substream_seed", "substream_rng"]


def substream_seed(root_seed: int, *tags) -> int:
    """Derive a stable 63-bit seed from a root seed and hashable tags.

    Tags are typically (name, epoch, index) tuples such as
    ("mask", 3, 17). The derivation is platform independent.
    """
    key = repr((int(root_seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream_rng(root_seed: int, *tags) -> np.random.Generator:
    """NumPy generator seeded from a named substream."""
    return np.random.default_rng(substream_seed(root_seed, *tags))
