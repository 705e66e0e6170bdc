import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssdrate.d2d import D2DParams, Fading, NetworkState

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vi_params():
    return D2DParams()


@pytest.fixture(scope="session")
def one_user():
    """Single always-active user with gamma = c = 1, slow fading."""
    params = D2DParams(num_ues=1, active_min=1, active_max=1, fading=Fading.SLOW)
    state = NetworkState(np.array([0]), np.array([1.0]), np.array([1.0]))
    return params, state
