import numpy as np
import pytest

from rgw.lattice import TorusLattice
from rgw.operators import CliffordRep, ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lat9():
    return TorusLattice(9, 3)


@pytest.fixture(scope="session")
def lat3():
    return TorusLattice(3, 3)


@pytest.fixture(scope="session")
def rep():
    return CliffordRep()


@pytest.fixture(scope="session")
def params():
    return ModelParams(e=0.1, m=0.5, mu=0.5)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
