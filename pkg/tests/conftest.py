import re

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results = {}
_titles = {}


def pytest_collection_modifyitems(items):
    for item in items:
        match = _CRITERION.search(item.name)
        if match and item.module.__name__.endswith("test_acceptance"):
            number = int(match.group(1))
            doc = (item.function.__doc__ or "").strip().splitlines()
            _titles[number] = doc[0] if doc else item.name


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match or "test_acceptance" not in report.nodeid:
        return
    number = int(match.group(1))
    if report.when == "call":
        _results[number] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.failed:
        _results[number] = "ERROR"
    elif report.when == "setup" and report.skipped:
        _results[number] = "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title = _titles.get(number, "")
        terminalreporter.write_line(
            f"criterion {number}: {_results[number]} - {title}")
