import numpy as np
import pytest

from lfg import imageio


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom_records():
    """Small shared phantom set (30 slices, 64x64, half lesioned)."""
    return imageio.generate_phantoms(7, 30, imageio.PhantomConfig(dims=(64, 64)))


@pytest.fixture(scope="session")
def lesioned_records(phantom_records):
    return [r for r in phantom_records if r.has_lesion]
