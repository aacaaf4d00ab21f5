"""
Seed-derived random streams, one independent stream per (node, purpose).
"""

import hashlib
import math
from typing import List

import numpy as np

from .scenario import NodeId

_ROLE_CODES = {"OH": 1, "EH": 2, "MH": 3}
_SEED_MASK = (1 << 64) - 1


def _purpose_key(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class RngStream:
    """
    Deterministic uniform stream backed by a numpy PCG64 generator.

    Draws are pulled from the generator in fixed-size blocks; the sequence
    depends only on the seed material, never on how callers interleave streams.
    """

    __slots__ = ("_gen", "_buf", "_pos")

    BLOCK = 16

    def __init__(self, seed_seq: np.random.SeedSequence):
        self._gen = np.random.Generator(np.random.PCG64(seed_seq))
        self._buf: List[float] = []
        self._pos = 0

    def random(self) -> float:
        """Uniform draw in [0, 1)."""
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self.BLOCK).tolist()
            self._pos = 0
        value = self._buf[self._pos]
        self._pos += 1
        return value

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def bernoulli(self, p: float) -> bool:
        # always consumes exactly one draw
        return self.random() < p

    def exponential(self, mean: float = 1.0) -> float:
        return -mean * math.log1p(-self.random())

    def draws(self, n: int) -> List[float]:
        return [self.random() for _ in range(n)]


def derive_rng(seed: int, node: NodeId, purpose: str) -> RngStream:
    """
    Derive the stream for ``(seed, node, purpose)``.

    Args:
        seed: Scenario seed (any integer; reduced to 64 bits)
        node: Node owning the stream
        purpose: Free-form label, e.g. ``"connect:oh3"``

    Returns:
        A fresh RngStream positioned at its first draw
    """
    seq = np.random.SeedSequence(
        entropy=seed & _SEED_MASK,
        spawn_key=(_ROLE_CODES[node.role.value], node.id, _purpose_key(purpose)),
    )
    return RngStream(seq)
