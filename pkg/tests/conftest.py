from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            _CRITERIA[name] = "SKIP"
        else:
            _CRITERIA.setdefault(name, "PASS")
            if report.failed:
                _CRITERIA[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number, _, title = name[len("test_criterion_"):].partition("_")
        terminalreporter.write_line(f"criterion {int(number):2d} {title.replace('_', ' '):<28} {_CRITERIA[name]}")
