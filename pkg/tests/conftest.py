import os

import numpy as np
import pytest

os.environ.setdefault("DRHT_THREADS", "0")

from drht import numerics as nx  # noqa: E402

nx.configure_threads()


@pytest.fixture
def f64():
    with nx.precision(64):
        nx.set_check_finite(True)
        try:
            yield
        finally:
            nx.set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
