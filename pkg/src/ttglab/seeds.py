"""Master-seed splitting.

Every stochastic component draws from its own stream derived as
default_rng([master, component_code]), so toggling one component's
randomness never perturbs the others.
"""

from __future__ import annotations

import numpy as np

_COMPONENTS = {
    "data": 0,        # episode choice and batch draws
    "w": 1,           # latent weight-bank draws
    "labels": 2,      # pseudo-label draws
    "init_theta": 3,  # classifier initialization
    "init_phi": 4,    # variational network initialization
    "stream": 5,      # target stream shuffling
    "ttg": 6,         # test-time sampling (w and labels combined)
    "dataset": 7,     # synthetic dataset noise
}


def component_rng(master: int, component: str) -> np.random.Generator:
    return np.random.default_rng([int(master), _COMPONENTS[component]])


def component_seed(master: int, component: str, extra: int = 0) -> int:
    """A plain integer seed for APIs that take one."""
    ss = np.random.SeedSequence([int(master), _COMPONENTS[component], int(extra)])
    return int(ss.generate_state(1)[0])
