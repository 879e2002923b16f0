"""Deterministic RNG sub-streams keyed by (seed, purpose, round, client, ...).

Every stochastic step in the simulator draws from its own numpy Generator
built from an explicit integer key list, so results never depend on the
order in which clients are simulated and a run is reproducible end to end.
"""

import numpy as np

# purpose tags; keep values stable, they are part of run reproducibility
CLIENT_SAMPLING = 1
SERVER_NOISE = 2
FEATURE_DRAW = 3
BATCH_ORDER = 4


def rng_for(*keys):
    """Generator for an integer key path, e.g. rng_for(seed, round, tag)."""
    return np.random.default_rng([int(k) for k in keys])


def subseed(*keys):
    """Collapse a key path into a single non-negative int seed."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])
