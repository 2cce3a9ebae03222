"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import re

CRITERIA = {
    1: "gradient suite",
    2: "synthetic tracking",
    3: "box metric oracles",
    4: "HOTA / CLEARMOT toys",
    5: "dynamic weight and fusion algebra",
    6: "convex-hull box regression",
    7: "pipeline determinism and closure",
    8: "KITTI end-to-end run (optional)",
}

_outcomes: dict[int, str] = {}
details: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            _outcomes[n] = "SKIP"
        else:
            _outcomes[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        status = _outcomes.get(n, "NOT RUN")
        extra = f"  ({details[n]})" if n in details else ""
        terminalreporter.write_line(f"C{n} {status:7s} {name}{extra}")
