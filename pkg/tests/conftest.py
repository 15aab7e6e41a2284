import pytest

from corpus import g0


@pytest.fixture
def G0():
    return g0()
