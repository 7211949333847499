import numpy as np
import pytest

from wavelldm import tensor


@pytest.fixture(autouse=True)
def _checked_mode():
    with tensor.checked(True):
        yield


@pytest.fixture
def f64():
    with tensor.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: (int(s.split()[1].rstrip("ab:")), s)):
            terminalreporter.write_line(line)
