import numpy as np
import pytest

from actkit.engine import calibration_tensors, collect_calibration
from actkit.stcs import profile_heads
from actkit.toy import build_toy_model


@pytest.fixture(scope="session")
def model():
    return build_toy_model()


@pytest.fixture(scope="session")
def calib_runs(model):
    return collect_calibration(model, 20)


@pytest.fixture(scope="session")
def manifest(model, calib_runs):
    return profile_heads(calibration_tensors(calib_runs), n_dynamic=4, tau=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, (title, True))
    _CRITERIA[n] = (title, prev[1] and not rep.failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
