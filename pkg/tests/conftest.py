import pytest

from nmbc.model import MtuParams
from nmbc.synth import example_model


@pytest.fixture(scope="session")
def right_leg():
    return example_model("right_leg")


@pytest.fixture(scope="session")
def bilateral():
    return example_model("bilateral")


@pytest.fixture
def params():
    return MtuParams(shape_factor=-1.0, f_max_iso=1000.0, l_opt=0.05, l_slack=0.25, alpha_opt=0.2)
