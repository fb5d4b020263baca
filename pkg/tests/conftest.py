import logging
from functools import lru_cache

import numpy as np
import pytest

from gridtwin.fixtures import LOAD_SCALE, load_builtin, synthetic_loads
from gridtwin.powerflow import generate_samples

FIXTURES = ("feeder13", "feeder37", "feeder69")
K_DEFAULT = 200
SEED = 1

# filled by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@lru_cache(maxsize=None)
def fixture_data(name: str, seed: int = SEED, K: int = K_DEFAULT, model: str = "exact"):
    """(net, library, samples) for a builtin feeder at its default loading."""
    net, lib = load_builtin(name)
    p, q = synthetic_loads(net.n, K, seed, scale=LOAD_SCALE[name])
    return net, lib, generate_samples(net, p, q, model=model)


@pytest.fixture(params=FIXTURES)
def feeder(request):
    return fixture_data(request.param) + (request.param,)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_sample_ratio_warning(caplog):
    caplog.set_level(logging.ERROR, logger="gridtwin.topology")


def rel_err(est, true):
    return np.abs(np.asarray(est) - np.asarray(true)) / np.abs(np.asarray(true))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
