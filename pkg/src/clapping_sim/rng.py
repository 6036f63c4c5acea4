"""Named, independent random streams.

Every stochastic component of a run (sampling, each stochastic compressor
per boundary per direction, data generation) draws from its own stream so
that reconfiguring one component never perturbs the draws of another.
Streams are derived from a base seed plus a string name via SeedSequence,
which is stable across platforms and numpy versions.
"""

from __future__ import annotations

import hashlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for (seed, name), deterministic and independent
    of all streams with a different name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    spawn_key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))
