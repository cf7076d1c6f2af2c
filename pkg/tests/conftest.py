import numpy as np
import pytest

from app.kernels import random_symmetric
from app.measure_space import MeasureSpace
from app.rng import kernel_generator


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    # no archive writes and serial execution unless a test opts in
    monkeypatch.delenv("CHAOS_RUN_ARCHIVE", raising=False)
    monkeypatch.setenv("CHAOS_WORKERS", "1")


@pytest.fixture
def space1():
    return MeasureSpace(1, (1.0,))


@pytest.fixture
def space2():
    return MeasureSpace(2, (0.7, 1.3))


@pytest.fixture
def space3():
    return MeasureSpace(3, (0.5, 1.0, 1.5))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def random_kernel():
    """random_kernel(space, order, index) -> reproducible SymKernel."""

    def _make(space, order, index=0, seed=11):
        return random_symmetric(space, order, kernel_generator(seed, index))

    return _make
