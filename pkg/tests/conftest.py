"""Prints a one-line verdict per acceptance criterion after the run."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::Test\w+::test_c(\d\d)_")
_VERDICTS = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    entry = _VERDICTS.setdefault(int(m.group(1)), {"ok": True, "notes": []})
    entry["ok"] &= report.passed
    entry["notes"] += [str(v) for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, entry in sorted(_VERDICTS.items()):
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {num:2d}: {status}" + (f"  ({detail})" if detail else ""))
