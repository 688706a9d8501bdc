"""Deterministic random-stream derivation.

Every stochastic routine in the package takes an explicit ``numpy.random.Generator``.
Helpers here derive independent child streams from a seed plus a path of labels,
so that any run can be replayed bit for bit from its manifest and parallel
workers never share a stream.
"""

from __future__ import annotations

import os
import zlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf8"))


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by ``seed`` and a label path.

    The same (seed, path) pair always yields the same stream; distinct paths
    yield statistically independent streams.
    """
    entropy = (int(seed),) + tuple(_label_to_int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Split ``count`` independent child generators off an existing one."""
    return rng.spawn(count)


def worker_count() -> int:
    """Thread budget for data-parallel loops, from DYNCOV_THREADS (default 1)."""
    raw = os.environ.get("DYNCOV_THREADS", "1")
    try:
        k = int(raw)
    except ValueError:
        return 1
    return max(1, k)
