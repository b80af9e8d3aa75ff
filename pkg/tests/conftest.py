"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_OUTCOMES: dict[str, list] = {}


@pytest.fixture
def measured(request):
    """Store measured values shown next to the criterion's PASS/FAIL line."""
    details: dict = {}
    request.node.user_properties.append(("measured", details))
    return details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call") or report.skipped:
        return
    if report.when == "setup" and report.passed:
        return
    name = marker.args[0]
    details = dict(item.user_properties).get("measured", {})
    ok = report.passed
    prev = _OUTCOMES.get(name)
    _OUTCOMES[name] = [ok and (prev is None or prev[0]), details]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, details) in _OUTCOMES.items():
        extra = ", ".join(f"{k}={v}" for k, v in details.items())
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{extra}]" if extra else ""))
