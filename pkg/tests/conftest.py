"""Shared fixtures and the acceptance summary printed after the run."""

import numpy as np
import pytest

from zonalvol.mesh import make_grid, make_two_tet

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = int(marker.args[0])
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if call.excinfo is None else "FAIL"
    prev = _RESULTS.get(n)
    if prev is not None and prev[0] == "FAIL":
        status = "FAIL"
    joined = detail if prev is None or not prev[1] else f"{prev[1]}; {detail}" if detail else prev[1]
    _RESULTS[n] = (status, joined)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_tet():
    return make_two_tet()


@pytest.fixture(scope="session")
def grid3():
    return make_grid(3, 3, 3)
