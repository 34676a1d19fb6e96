from __future__ import annotations

_labels: dict[str, str] = {}
_results: dict[str, bool] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): contractual acceptance check")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            _labels[item.nodeid] = mark.args[0] if mark.args else item.name


def pytest_runtest_logreport(report):
    if report.nodeid not in _labels:
        return
    ok = _results.get(report.nodeid, True) and not report.failed
    if report.when == "call" or report.failed:
        _results[report.nodeid] = ok


def pytest_terminal_summary(terminalreporter):
    if not _labels:
        return
    terminalreporter.section("acceptance")
    for nodeid, label in _labels.items():
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[_results.get(nodeid)]
        terminalreporter.write_line(f"{status}  {label}")
