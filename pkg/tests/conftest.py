import numpy as np
import pytest

from posenet3d import bodymodel as bm
from posenet3d import data


@pytest.fixture(scope="session")
def body():
    return bm.synth_model(np.random.default_rng(1234))


@pytest.fixture(scope="session")
def small_body():
    return bm.synth_model(np.random.default_rng(99), num_vertices=200)


@pytest.fixture(scope="session")
def motion(body):
    return data.synth_motion(body, np.random.default_rng(7), 3, 30)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary ---------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[number] = (title, report.outcome, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{verdict}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
