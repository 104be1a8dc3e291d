"""Counter-based random streams.

Every block of ``CHUNK`` particles owns an independent Philox stream keyed by
``(seed, stream, chunk)``. Draws inside a block are particle-major, so the
increments of particle ``p`` depend only on ``(seed, stream, p)`` and the
number of steps; the particle count and the worker count never change them.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 4096

# stream identifiers; population index is added on top
STREAM_REFERENCE = 0
STREAM_FEEDBACK = 10_000
STREAM_MIX = 20_000
STREAM_COST = 30_000
STREAM_PROBE = 40_000
STREAM_INIT = 50_000
STREAM_PROJECTION = 60_000


def generator(*key: int) -> np.random.Generator:
    """Philox generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def standard_normal_block(seed, stream, n_particles, n_steps, dim, n_threads=1):
    """Standard normals of shape ``(n_particles, n_steps, dim)``."""
    out = np.empty((n_particles, n_steps, dim))
    n_chunks = -(-n_particles // CHUNK)

    def fill(c):
        lo = c * CHUNK
        hi = min(lo + CHUNK, n_particles)
        out[lo:hi] = generator(seed, stream, c).standard_normal((hi - lo, n_steps, dim))

    if n_threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(fill, range(n_chunks)))
    else:
        for c in range(n_chunks):
            fill(c)
    return out


def brownian_increments(seed, stream, n_particles, dt, dim, n_threads=1):
    """Brownian increments ``sqrt(dt_k) * N(0, I)`` for every particle and step."""
    dt = np.asarray(dt, dtype=float)
    z = standard_normal_block(seed, stream, n_particles, dt.size, dim, n_threads)
    z *= np.sqrt(dt)[None, :, None]
    return z
