import json
from pathlib import Path

import numpy as np
import pytest

from lpcontract.models import overdamped1d

FIXTURES = Path(__file__).parent / "fixtures"

U0 = "x^2"
U1 = "x^2 + 2*exp(-x^2)"
U2 = "x^2 + 2*exp(-x^2) + a*cos(10*x)"
U2_PARAMS = {"a": 0.25}


def overdamped(U, theta2, params=None):
    return overdamped1d(U, float(np.sqrt(theta2)), params)


@pytest.fixture(scope="session")
def golden_constants():
    return json.loads((FIXTURES / "golden_constants.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
