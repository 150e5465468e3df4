"""Collects acceptance results and prints one verdict line per criterion."""

_ACCEPTANCE_MODULE = "test_acceptance"
_results: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or _ACCEPTANCE_MODULE not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    criterion = name.removeprefix("test_").replace("_", " ")
    detail = dict(report.user_properties).get("detail", "")
    _results.append((criterion, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance")
    for criterion, verdict, detail in _results:
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"{verdict}  {criterion}{suffix}")
