import pytest
from hypothesis import settings

from rsmfc.lq_model import LqParams

from . import oracles


@pytest.fixture
def stress():
    return LqParams(**oracles.STRESS)


@pytest.fixture
def reference():
    return LqParams()


# some properties run small simulations; wall time is not part of the contract
settings.register_profile("rsmfc", deadline=None)
settings.load_profile("rsmfc")
