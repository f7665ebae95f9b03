import numpy as np
import pytest

from probetrace import _kernels_py
from probetrace._backend import compiled_available, load_backend


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


BACKENDS = ["python"] + (["compiled"] if compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Kernel module for each available backend."""
    mod = load_backend(request.param)
    if request.param == "compiled":
        assert mod is not _kernels_py
    return mod


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_dense(rng, L, symmetric=False):
    """Well-conditioned random dense matrix."""
    a = rng.standard_normal((L, L)) / np.sqrt(L) + 2.0 * np.eye(L)
    return (a + a.T) / 2 if symmetric else a
