"""Named deterministic RNG streams.

Every random decision in the engine draws from a generator derived from
(master seed, stream id, *indices). Streams never share state, so code
paths that are switched off (fusion, the EMA gate, the unsupervised
branch) consume nothing from the streams of the paths that stay on.
That property is what makes the reduction tests bit-exact.
"""

from __future__ import annotations

import numpy as np

DATA = 1        # per-index scene generation
SPLIT = 2       # dataset split shuffle
BATCH_L = 3     # labeled batch order, per pass
BATCH_U = 4     # unlabeled batch order, per epoch
AUG_L = 5       # weak geometric transform, labeled (iter, slot)
AUG_U = 6       # weak geometric transform, unlabeled (iter, slot)
STRONG = 7      # photometric perturbations (iter, slot)
FUSION = 8      # adaptive fusion draws, per iter
GATE = 9        # EMA gate draw, per iter
INIT = 10       # parameter initialization

_MASK64 = (1 << 64) - 1


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for stream `path` under `master_seed`; pure in its inputs."""
    entropy = (int(master_seed) & _MASK64,) + tuple(int(p) & _MASK64 for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy))
