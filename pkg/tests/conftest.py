import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crossfactorial.design import DesignSpec, randomise, systematic_design  # noqa: E402

# the running examples at their reference sizes
RUNNING = {
    "a": dict(shape="a", n_I=2, n_T=16, n_R=10),
    "b": dict(shape="b", n_I=2, n_T=16, n_B=5, n_R=2),
    "c": dict(shape="c", n_I=2, n_T=8, n_B=5, n_C=6, n_R=2),
}


@pytest.fixture(params=["a", "b", "c"])
def running_design(request):
    return systematic_design(DesignSpec(**RUNNING[request.param]))


@pytest.fixture
def design_a():
    return randomise(DesignSpec(**RUNNING["a"], seed=7))


@pytest.fixture
def design_b():
    return randomise(DesignSpec(**RUNNING["b"], seed=7))


@pytest.fixture
def design_c():
    return randomise(DesignSpec(**RUNNING["c"], seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
