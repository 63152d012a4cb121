import numpy as np
import pytest

from fkdsim.nn.spec import parse_spec

SMALL_CNN = """input 8 8 2
conv2d out_channels=3 kernel=3 stride=2 padding=same
batchnorm
leaky_relu slope=0.1
maxpool2d window=2 stride=2
conv2d out_channels=4 kernel=2 stride=1 padding=valid
batchnorm
leaky_relu
global_avg_pool
dense out_units=4
"""


@pytest.fixture
def small_cnn():
    return parse_spec(SMALL_CNN)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_spec(n_in, n_out):
    return parse_spec(f"input {n_in}\ndense out_units={n_out}\n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
