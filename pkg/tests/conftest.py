import numpy as np
import pytest

from edgemon import experiments as ex
from edgemon.scenario import default_scenario
from edgemon.telemetry import FEATURES, Dataset


def make_dataset(x, y=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return Dataset(np.arange(len(x)) * 1000, x, y)


def random_dataset(rng, n, n_features_used=10, positive_rate=0.3):
    x = np.zeros((n, len(FEATURES)))
    x[:, :n_features_used] = rng.normal(size=(n, n_features_used))
    y = (rng.random(n) < positive_rate).astype(int)
    y[0], y[1] = 0, 1
    return make_dataset(x, y)


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def default_model(scenario):
    return ex.train_detector(scenario)


@pytest.fixture(scope="session")
def test_set(scenario):
    return ex.make_test_set(scenario)


# acceptance results are collected here and echoed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
