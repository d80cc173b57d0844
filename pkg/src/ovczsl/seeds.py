"""Domain-separated random number generators.

Every stochastic component draws from a Philox counter-based bit generator
(4x64, as shipped with numpy) keyed by ``(user seed, domain)``. Separating
domains keeps the benchmark generator, the encoder initialization, batch
shuffling, and diagnostics resampling on independent streams even when they
share one user-facing seed.
"""

from __future__ import annotations

import numpy as np

DOMAIN_BENCHMARK = 0
DOMAIN_ENCODER = 1
DOMAIN_CONTEXT = 2
DOMAIN_BATCHES = 3
DOMAIN_DIAGNOSTICS = 4


def seeded_rng(seed: int, domain: int) -> np.random.Generator:
    """Return the deterministic generator for ``seed`` within ``domain``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, domain))))
