"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_VERDICTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        if report.passed or key not in _VERDICTS:
            _VERDICTS[key] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (status, detail) in sorted(_VERDICTS.items()):
        line = f"criterion {num} ({name.replace('_', ' ')}): {status}"
        terminalreporter.write_line(f"{line} | {detail}" if detail else line)
