"""Prints one PASS/FAIL line per acceptance criterion after the run."""

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        n = report.nodeid.split("test_criterion_")[1].split("_")[0]
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome != "passed" or n not in _CRITERIA:
            _CRITERIA[n] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA, key=int):
        outcome, detail = _CRITERIA[n]
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {mark}  {detail}")
