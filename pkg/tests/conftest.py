import numpy as np
import pytest

from ahcf.lattice import Lattice
from ahcf.structure import standard_structure


@pytest.fixture
def lat2():
    return Lattice(1, 16)


@pytest.fixture
def lat4():
    return Lattice(2, 8)


@pytest.fixture
def flat2(lat2):
    return standard_structure(lat2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
