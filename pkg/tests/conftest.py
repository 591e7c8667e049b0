from __future__ import annotations

import pytest

_RESULTS: dict[int, tuple[str, str, float]] = {}
_SETUP: dict[str, float] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "setup":
        # module fixtures (the overfit runs) count towards the first criterion using them
        _SETUP[item.nodeid] = report.duration
        if not report.passed:
            _RESULTS[n] = ("FAIL", title, report.duration)
    elif report.when == "call":
        seconds = _SETUP.get(item.nodeid, 0.0) + report.duration
        _RESULTS[n] = ("PASS" if report.passed else "FAIL", title, seconds)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, seconds = _RESULTS[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({seconds:.1f}s)")
