"""Collects outcomes of tests marked ``acceptance(n, title)`` and prints one line per criterion."""

import pytest

_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "setup" and report.passed:
        return
    if report.when == "teardown" and report.passed:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "outcomes": []})
    entry["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        tr.write_line(f"criterion {n:>2}: {verdict}  {entry['title']}")
