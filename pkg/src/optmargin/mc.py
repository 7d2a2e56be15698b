"""Deterministic seeded Monte-Carlo draw generation.

Draws are produced in fixed-size chunks, each chunk seeded independently from
(seed, chunk index).  The chunk layout never depends on how many workers
consume the chunks, so results are byte-identical for 1 or N workers.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_SIZE = 1 << 14


def chunk_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for one chunk, a pure function of (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def standard_normals(seed: int, n: int, cols: int, n_workers: int = 1) -> np.ndarray:
    """(n, cols) standard normal draws, independent of worker count."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.empty((0, cols))
    n_chunks = (n + CHUNK_SIZE - 1) // CHUNK_SIZE

    def one(i):
        rows = min(CHUNK_SIZE, n - i * CHUNK_SIZE)
        return chunk_rng(seed, i).standard_normal((rows, cols))

    if n_workers <= 1:
        parts = [one(i) for i in range(n_chunks)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            parts = list(ex.map(one, range(n_chunks)))
    return np.vstack(parts)
