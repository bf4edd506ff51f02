import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = "test_acceptance.py::"
_results = {}


def pytest_runtest_logreport(report):
    if _ACCEPTANCE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = dict(report.user_properties).get("measured", "")
        _results[report.nodeid] = (report.outcome, measured)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, measured) in sorted(_results.items(), key=lambda kv: _order(kv[0])):
        name = nodeid.split("::")[-1]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {measured}".rstrip())


def _order(nodeid):
    parts = nodeid.split("::")[-1].split("_")
    return int(parts[2]) if len(parts) > 2 and parts[2].isdigit() else 99
