import numpy as np
import pytest

from dgwm.tensor import set_finite_check


@pytest.fixture(autouse=True, scope="session")
def _finite_guard():
    """Tests run with the NaN/Inf guard on; timing code switches it off locally."""
    prev = set_finite_check(True)
    yield
    set_finite_check(prev)


@pytest.fixture
def gen():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT):
            terminalreporter.write_line(line)
