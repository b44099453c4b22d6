"""Counter-based seeded random streams.

Substreams are keyed by (purpose-tag, index) so that any unit of work (one
image, one Langevin chain, one training step) owns an independent stream
whose output never depends on scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_hash(tag: str, index: int) -> int:
    h = hashlib.blake2b(f"{tag}/{index}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Root of a family of independent Philox substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def substream(self, tag: str, index: int = 0) -> np.random.Generator:
        key = np.array([self.seed, _tag_hash(tag, index)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, tag: str, index: int, shape) -> np.ndarray:
        return self.substream(tag, index).standard_normal(shape)

    def __repr__(self):
        return f"RngStream(seed={self.seed})"
