import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lab", max_examples=40, deadline=None)
settings.load_profile("lab")

FIXTURES = Path(__file__).with_name("fixtures")


@pytest.fixture(scope="session")
def golden():
    data = json.loads((FIXTURES / "golden.json").read_text())
    assert data["schema"] == "fbsdelab-golden" and data["version"] == 1
    return {k: v for k, v in data["values"].items()}


@pytest.fixture(scope="session")
def nonlinear_problem():
    from fbsdelab.checks import nonlinear_setup
    return nonlinear_setup(0.5)


@pytest.fixture(scope="session")
def linear_spec():
    from fbsdelab.checks import standard_linear_spec
    return standard_linear_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
