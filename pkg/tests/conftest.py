import numpy as np
import pytest

from morphoscope.phantom import PhantomSpec, base_anatomy
from morphoscope.volume import Grid3


@pytest.fixture(scope="session")
def spec32():
    return PhantomSpec(grid=Grid3((32, 32, 32)))


@pytest.fixture(scope="session")
def spec64():
    return PhantomSpec()


@pytest.fixture(scope="session")
def base64(spec64):
    return base_anatomy(spec64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line[1])
