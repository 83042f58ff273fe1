import numpy as np
import pytest

from dpblr.distributions import make_rng
from dpblr.model import Dataset


@pytest.fixture
def rng():
    return make_rng(12345)


def random_dataset(rng, n, d, bias=True, bound=1.0):
    x = rng.uniform(-bound, bound, size=(n, d - 1 if bias else d))
    y = rng.uniform(-bound, bound, size=n)
    return Dataset.from_raw(x, y, bias=bias)


def standard_errors(draws):
    return draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
