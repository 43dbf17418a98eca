"""Random-stream helpers.

Every sampler and trainer takes an explicit ``numpy.random.Generator``.
Independent streams for parallel chains or separate training stages are
derived with :func:`split_streams`, which spawns children of a
``SeedSequence``; the k-th child of seed ``s`` is always the same stream.
"""

from __future__ import annotations

import numpy as np


def split_streams(seed: int | np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    """Return ``n`` independent generators derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
