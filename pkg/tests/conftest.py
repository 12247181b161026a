"""Shared test configuration: acceptance-criterion result reporting."""
import re

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    m = re.search(r"test_acceptance.*::test_criterion_(\d+)", report.nodeid)
    if m:
        _ACCEPTANCE[int(m.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        outcome = _ACCEPTANCE[num]
        tag = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"criterion {num:2d}: {tag}")
