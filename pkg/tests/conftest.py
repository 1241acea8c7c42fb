import re

CRITERIA = {
    1: "confusion-count oracle",
    2: "gradient check",
    3: "directional table reproduction on synthetic data",
    4: "calibration oracle",
    5: "curve oracles",
    6: "reframing",
    7: "determinism",
    8: "property suites and metrics branch coverage",
}

_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ok = report.outcome == "passed"
        _outcomes[n] = _outcomes.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")
