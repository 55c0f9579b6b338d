import functools

import numpy as np
import pytest

from vfbayes.data_io import TruthConfig, ingest, simulate
from vfbayes.model import IndividualData, Observation


@functools.lru_cache(maxsize=None)
def simulated(preset: str = "table2", n_individuals: int = 2, visits: int = 6, seed: int = 0, **overrides):
    cfg = TruthConfig.preset(preset, **overrides)
    records, truth = simulate(cfg, n_individuals, visits, np.random.default_rng(seed))
    return records, truth, ingest(records)


def toy_individual(values, times, censored=None, individual="T1"):
    """One eye, one hemifield, one location per value row; ``values[l][v]``."""
    values = np.atleast_2d(values)
    obs = []
    for l, row in enumerate(values, start=1):
        for v, (y, t) in enumerate(zip(row, times), start=1):
            cens = bool(y <= 0) if censored is None else bool(censored[l - 1][v - 1])
            obs.append(Observation(individual, 1, 1, l, v, float(t), 0.0 if cens else float(y), cens))
    return IndividualData(individual, obs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
