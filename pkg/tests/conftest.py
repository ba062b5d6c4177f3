import numpy as np
import pytest

from azrp.measures import RateFunction


@pytest.fixture
def mm1():
    return RateFunction.mm1()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
