"""Collects acceptance-criterion outcomes and prints one line per criterion."""

from collections import OrderedDict

_CRITERIA: "OrderedDict[int, dict]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            num, title = mark.args
            entry = _CRITERIA.setdefault(num, {"title": title, "ids": set(), "failed": [], "done": set()})
            entry["ids"].add(item.nodeid)


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid not in entry["ids"]:
            continue
        if report.failed:
            entry["failed"].append(report.nodeid)
        if report.when == "call" or report.skipped or report.failed:
            entry["done"].add(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        if entry["failed"]:
            status = "FAIL"
        elif entry["done"] == entry["ids"]:
            status = "PASS"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {num:2d} {status:7s} {entry['title']}")
