import os

import pytest
from hypothesis import HealthCheck, settings

from bigjump.laws import make_law

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def coin():
    """Fair +-1 steps."""
    return make_law("Bounded", {"values": [-1, 1], "masses": [0.5, 0.5]})


@pytest.fixture(scope="session")
def pareto25():
    return make_law("ParetoZeta", {"beta": 2.5})


@pytest.fixture(scope="session")
def pareto25_small():
    return make_law("ParetoZeta", {"beta": 2.5}, K_cap=1 << 14)


@pytest.fixture(scope="session")
def zrp3():
    return make_law("ZrpOccupation", {"b": 3})


@pytest.fixture(scope="session")
def zrp4():
    return make_law("ZrpOccupation", {"b": 4})


@pytest.fixture(scope="session")
def zrp4_small():
    return make_law("ZrpOccupation", {"b": 4}, K_cap=1 << 16)
