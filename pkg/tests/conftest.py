import numpy as np
import pytest

from stairnet.tensor import BACKENDS


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


@pytest.fixture(autouse=True)
def _private_lock(tmp_path, monkeypatch):
    # keep the host lock of parallel test sessions apart
    monkeypatch.setenv("STAIRNET_LOCK", str(tmp_path / "host.lock"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
