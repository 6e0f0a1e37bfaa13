"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_ACCEPTANCE: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    _ACCEPTANCE.setdefault(marker.args[0], []).append(report.outcome)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test checks")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0].rstrip("."))):
        ok = all(o == "passed" for o in _ACCEPTANCE[name])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
