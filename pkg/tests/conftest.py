import numpy as np
import pytest

from fastmax import _backend
from fastmax.tensor import Rng

AVAILABLE_BACKENDS = sorted(_backend.BACKENDS)


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture(params=AVAILABLE_BACKENDS)
def backend(request):
    """Run the test once per importable kernel backend."""
    prev = _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(prev)


def qkv(rng, n, d):
    return tuple(np.array(rng.normal((n, d))) for _ in range(3))
