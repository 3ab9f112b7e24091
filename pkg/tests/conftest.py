import pytest

from chemvm.chempiler import build_default_graph

from _support import FIXTURES


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture()
def default_graph():
    return build_default_graph()
