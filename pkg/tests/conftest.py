import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from music import sampling as P
from music import solvers as S

settings.register_profile("music", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "music"))


@pytest.fixture(scope="session")
def swe_series():
    return S.solve_swe_rusanov()


@pytest.fixture(scope="session")
def swe_dataset(swe_series):
    return P.build_dataset(list(swe_series), "swe")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
