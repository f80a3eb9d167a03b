"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

from __future__ import annotations

_outcomes: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    prev = _outcomes.get(name, "PASS")
    if report.failed:
        _outcomes[name] = "FAIL"
    elif report.skipped:
        _outcomes[name] = "SKIP"
    elif report.when == "call":
        _outcomes[name] = prev


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_outcomes, key=lambda n: int(n.split("_")[2])):
        num = int(name.split("_")[2])
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num:2d} {label:<36} {_outcomes[name]}")
