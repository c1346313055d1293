"""Counter-based random streams keyed by (seed, trajectory index).

Trajectories are grouped in fixed blocks of ``BLOCK`` paths.  Block ``k`` of
purpose ``tag`` owns a Philox generator seeded from
``SeedSequence(seed, spawn_key=(tag, k))``; each time step draws a
``(BLOCK, width)`` array from it, and trajectory ``i`` reads row ``i % BLOCK``
of block ``i // BLOCK``.  The draws of a trajectory therefore depend only on
the seed, its index and the step count, never on how blocks are scheduled.
"""

from __future__ import annotations

import numpy as np

BLOCK = 4096

# Purposes get disjoint key spaces.
MAIN = 0
REFLECTION = 1
AUXILIARY = 2
DIRECTIONS = 3

__all__ = ["BLOCK", "MAIN", "REFLECTION", "AUXILIARY", "DIRECTIONS", "block_generator", "RngStream", "block_ranges"]


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def block_generator(seed: int, block: int, tag: int = MAIN) -> np.random.Generator:
    ss = np.random.SeedSequence(_check_seed(seed), spawn_key=(int(tag), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def block_ranges(n: int) -> list[tuple[int, int, int]]:
    """(block index, start, stop) covering trajectories 0..n-1."""
    return [(k, s, min(n, s + BLOCK)) for k, s in enumerate(range(0, n, BLOCK))]


class RngStream:
    """The standard-normal stream of a single trajectory.

    Draws are bit-identical to what the batched engines feed trajectory
    ``index``; this makes single-path runs directly comparable with
    ensemble runs.  It is slow (a whole block row is generated per draw) and
    intended for single-path work and tests.
    """

    def __init__(self, seed: int, index: int, tag: int = MAIN):
        self.seed = _check_seed(seed)
        self.index = int(index)
        self.tag = int(tag)
        self.counter = 0
        self._gen = block_generator(self.seed, self.index // BLOCK, self.tag)
        self._row = self.index % BLOCK

    def normal(self, width: int) -> np.ndarray:
        """One step's worth of ``width`` standard normals."""
        draw = self._gen.standard_normal((BLOCK, int(width)))[self._row].copy()
        self.counter += 1
        return draw

    def __repr__(self):
        return f"RngStream(seed={self.seed}, index={self.index}, tag={self.tag}, counter={self.counter})"
