import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(fn, x, idx, h):
    """Central difference of scalar fn w.r.t. x.flat[idx] (x is modified and restored)."""
    flat = x.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    fp = fn()
    flat[idx] = old - h
    fm = fn()
    flat[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


# acceptance criteria record a one-line verdict here; printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
