"""Per-criterion pass/fail summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; a
criterion passes when every test carrying it passed.
"""

import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = mark.args
        entry = _results.setdefault(n, {"title": title, "passed": 0, "failed": 0, "skipped": 0})
        entry["skipped" if rep.skipped else "passed" if rep.passed else "failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        verdict = "FAIL" if e["failed"] else "SKIP" if not e["passed"] else "PASS"
        total = e["passed"] + e["failed"] + e["skipped"]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {e['title']}  ({e['passed']}/{total} tests passed)")
