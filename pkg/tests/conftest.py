import numpy as np
import pytest

from smallnoise.model import constant_problem, cubic_problem, ou_problem

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def ou():
    return ou_problem()


@pytest.fixture
def cubic():
    return cubic_problem()


@pytest.fixture
def pure_noise():
    return constant_problem()


@pytest.fixture
def static():
    return constant_problem(drift=0.0, noise=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
