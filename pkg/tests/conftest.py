import random
from fractions import Fraction

import numpy as np
import pytest

from barter.economy import EconomyInstance, UtilitySpec
from barter.instances import example_one, worked_example


def random_instance(rng: random.Random, n: int, m: int, kind: str = "linear", max_q: int = 6,
                    unit: bool = False, max_c: int = 9) -> EconomyInstance:
    """Small random economy; ``unit`` forces all prices and weights to one."""
    prices = tuple(1 if unit else Fraction(rng.randint(1, 4), rng.randint(1, 2)) for _ in range(m))
    weights = tuple(1 if unit else rng.randint(1, 3) for _ in range(n))
    q = tuple(tuple(rng.randint(0, max_q) for _ in range(m)) for _ in range(n))
    if kind == "linear":
        utils = tuple(UtilitySpec.linear([rng.randint(0, max_c) for _ in range(m)]) for _ in range(n))
    else:
        utils = tuple(UtilitySpec.cara([rng.uniform(0.02, 0.6) for _ in range(m)], offset=float(m))
                      for _ in range(n))
    return EconomyInstance(prices=prices, weights=weights, endowments=q, utilities=utils)


@pytest.fixture
def worked():
    return worked_example()


@pytest.fixture
def ex1():
    return example_one()


@pytest.fixture
def rng():
    return random.Random(12345)


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)
