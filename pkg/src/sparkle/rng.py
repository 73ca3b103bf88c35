"""Counter-based random streams.

Every (seed, agent, iteration) triple owns its own generator, so the draws an
agent sees never depend on how many other agents exist, the order they are
evaluated in, or the number of worker threads.
"""

from __future__ import annotations

import numpy as np


def agent_stream(seed: int, agent: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(agent), int(k)]))


def replicate_seed(master_seed: int, replicate: int) -> int:
    if replicate == 0:
        return int(master_seed)
    return int(np.random.SeedSequence([int(master_seed), int(replicate)]).generate_state(1, np.uint32)[0])
