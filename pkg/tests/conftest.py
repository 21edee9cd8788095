import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20200316)


def random_stochastic(rng, J, zero_frac=0.0):
    P = rng.uniform(size=(J, J))
    if zero_frac:
        P[rng.uniform(size=(J, J)) < zero_frac] = 0.0
        P[np.arange(J), np.arange(J)] += 0.1
    return P / P.sum(axis=1, keepdims=True)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
