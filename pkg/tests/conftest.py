from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from powr.env import exact_dynamics, make_env

settings.register_profile("powr", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("powr")


@pytest.fixture(scope="session")
def lake():
    return make_env("gridworld4")


@pytest.fixture(scope="session")
def lake_mdp(lake):
    return exact_dynamics(lake)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""
    def _add(number, passed, detail):
        _REPORT.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return _add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
