"""Suite-wide pytest config: acceptance-criterion result lines.

Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL/SKIP
line each in a terminal section at the end of the run, so the acceptance
status is readable without scrolling through the full test log.
"""

_BY_NODE: dict = {}    # nodeid -> (number, title)
_RESULTS: dict = {}    # number -> (outcome word, title, detail)

_WORDS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP", "error": "ERROR"}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, title): numbered acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _BY_NODE[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    entry = _BY_NODE.get(report.nodeid)
    if entry is None:
        return
    n, title = entry
    detail = ""
    if report.when == "call":
        pass
    elif report.when == "setup" and report.outcome != "passed":
        # skipped or errored before the test body ran
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2].removeprefix("Skipped: ")
    else:
        return
    word = _WORDS.get(report.outcome, report.outcome.upper())
    _RESULTS[n] = (word, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        word, title, detail = _RESULTS[n]
        line = f"[criterion {n:02d}] {word:<4} {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
