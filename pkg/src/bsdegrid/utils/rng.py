"""Counter-based Gaussian streams.

Normals are keyed by (seed, stream tag, counter..., block) where a block covers a fixed number of
consecutive path indices. Each block is drawn in full from its own Philox generator, so the value
for path m never depends on how many paths were requested: growing M extends a batch without
perturbing it, and any sub-range of paths can be regenerated on its own.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

BLOCK_SIZE = 4096

TAG_INCREMENTS = 1
TAG_BRIDGE = 2
TAG_SMOOTHNESS = 3
TAG_NESTED = 4
TAG_SPOT_CHECK = 5


def derive_seed(seed: int, n: int) -> int:
    """Seed of one run inside a sweep."""

    return int(seed) ^ int(n)


def _block_generator(seed: int, tag: int, counter: Sequence[int], block: int) -> np.random.Generator:
    entropy = [int(seed), int(tag), *(int(c) for c in counter), int(block)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def block_normals(
    seed: int,
    tag: int,
    counter: Sequence[int],
    first: int,
    count: int,
    width: int,
) -> np.ndarray:
    """Standard normals of shape (count, width) for paths first..first+count-1."""

    if count <= 0:
        return np.empty((0, width), dtype=float)
    out = np.empty((count, width), dtype=float)
    start_block = first // BLOCK_SIZE
    end_block = (first + count - 1) // BLOCK_SIZE
    written = 0
    for block in range(start_block, end_block + 1):
        draws = _block_generator(seed, tag, counter, block).standard_normal((BLOCK_SIZE, width))
        lo = max(first, block * BLOCK_SIZE) - block * BLOCK_SIZE
        hi = min(first + count, (block + 1) * BLOCK_SIZE) - block * BLOCK_SIZE
        out[written : written + hi - lo] = draws[lo:hi]
        written += hi - lo
    return out


def brownian_increments(
    seed: int,
    increments: np.ndarray,
    first: int,
    count: int,
    dim_q: int,
    stream: int = 0,
) -> np.ndarray:
    """Brownian increments of shape (count, N, q) with variance increments[k] at step k."""

    steps = len(increments)
    out = np.empty((count, steps, dim_q), dtype=float)
    for k in range(steps):
        normals = block_normals(seed, TAG_INCREMENTS, (stream, k), first, count, dim_q)
        out[:, k, :] = normals * np.sqrt(increments[k])
    return out
