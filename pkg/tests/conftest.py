import numpy as np
import pytest

from extd import ops


@pytest.fixture(autouse=True, scope="session")
def _finite_checks():
    ops.set_debug_checks(True)
    yield
    ops.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
