import numpy as np
import pytest


_ACCEPTANCE: list[tuple[str, str, str]] = []
_DETAILS: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    label = dict(report.user_properties).get("acceptance")
    if label:
        _ACCEPTANCE.append((label, "PASS" if report.passed else "FAIL", report.nodeid.split("::")[-1]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, name in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{label:<6} {status}  {name}")
    if _DETAILS:
        terminalreporter.section("acceptance measurements")
        for line in _DETAILS:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _acceptance_label(request):
    mark = request.node.get_closest_marker("acceptance")
    if mark:
        request.node.user_properties.append(("acceptance", mark.args[0]))


@pytest.fixture
def report():
    """Append a line to the measurements printed after the run."""
    return _DETAILS.append


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
