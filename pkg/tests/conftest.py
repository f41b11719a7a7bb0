import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.core import SeededRng  # noqa: E402
from modules.objectives import DoubleWell, QuadSaddle  # noqa: E402
from modules.privacy import PrivacyBudget  # noqa: E402


@pytest.fixture
def double_well():
    return DoubleWell(10)


@pytest.fixture
def quad_saddle():
    return QuadSaddle(10)


@pytest.fixture
def budget():
    return PrivacyBudget(epsilon=1.0, delta=1e-5)


@pytest.fixture
def rng():
    return SeededRng(1234)


def vec(*values):
    return torch.tensor(values, dtype=torch.float64)
