import pytest

from difsim.engine import Simulator
from difsim.network import Network
from difsim.topology import build_fat_tree


@pytest.fixture(scope="session")
def anyio_backend():
    return "asyncio"


@pytest.fixture
def sim():
    return Simulator(seed=7)


@pytest.fixture
def topo4():
    return build_fat_tree(4)


@pytest.fixture
def network(sim, topo4):
    return Network(sim, topo4)
