"""Counter-based random streams.

Every stream is keyed by ``(seed, *counters)`` so that results do not depend on
the order in which probes, batches or replications are evaluated.
"""
import numpy as np


def stream(seed, *counters):
    """Return a Philox generator for the stream ``(seed, *counters)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, counters)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *counters):
    """Derive a 63-bit integer seed from ``(seed, *counters)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, counters)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
