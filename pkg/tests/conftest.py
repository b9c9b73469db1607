import sys
from functools import lru_cache

import numpy as np
import pytest

from specden import phantom as ph
from specden import pipeline as pl


@lru_cache(maxsize=None)
def desk_truth():
    return ph.synthesize(ph.desk_spec())


@lru_cache(maxsize=None)
def desk_noisy(seed=0):
    return ph.add_poisson(desk_truth(), seed)


@lru_cache(maxsize=None)
def desk_oracle(seed=0):
    return pl.twin_oracle(desk_noisy(seed), desk_truth(), pl.FILTERED_WEIGHTED)


@pytest.fixture(scope="session")
def truth_cube():
    return desk_truth()


@pytest.fixture(scope="session")
def noisy_cube():
    return desk_noisy(0)


@pytest.fixture(scope="session")
def oracle():
    return desk_oracle(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
