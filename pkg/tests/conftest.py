"""Shared fixtures, including the session-level Monte Carlo runs.

The three experiment fixtures back the acceptance criteria and are only built
when a test actually requests them; expect a few minutes each at 1000
replications on two workers.
"""

from __future__ import annotations

import numpy as np
import pytest

from netmee import SimConfig, run_mc

ACCEPTANCE_SEED = 20250810
ACCEPTANCE_REPS = 1000


@pytest.fixture(scope="session")
def ring_1000():
    return run_mc(SimConfig(topology="ring", n=1000, reps=ACCEPTANCE_REPS,
                            master_seed=ACCEPTANCE_SEED))


@pytest.fixture(scope="session")
def ring_250():
    return run_mc(SimConfig(topology="ring", n=250, reps=ACCEPTANCE_REPS,
                            master_seed=ACCEPTANCE_SEED + 1))


@pytest.fixture(scope="session")
def rgg_1000():
    return run_mc(SimConfig(topology="rgg", n=1000, reps=ACCEPTANCE_REPS,
                            master_seed=ACCEPTANCE_SEED + 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
