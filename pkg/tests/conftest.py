"""Prints one line per acceptance criterion at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    outcome = "xfailed" if hasattr(report, "wasxfail") else report.outcome
    _RESULTS[item.nodeid] = (number, title, outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_RESULTS.values(), key=lambda r: r[0]):
        status = {"passed": "PASS", "xfailed": "FAIL (expected)"}.get(outcome, "FAIL")
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
