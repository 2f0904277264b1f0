import numpy as np
import pytest

from teamform import diffcore as dc


@pytest.fixture(autouse=True)
def float64_tensors():
    with dc.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
