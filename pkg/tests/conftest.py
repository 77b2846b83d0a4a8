"""One PASS/FAIL line per acceptance criterion at the end of the run."""

CRITERIA = {
    1: "phase-shifting exactness",
    2: "stereo unwrapping oracle equivalence",
    3: "robustness ordering under noise and jitter",
    4: "reference-plane band",
    5: "sphere-pair measurement",
    6: "gradient suite",
    7: "training sanity",
    8: "learned pipeline accuracy",
    9: "ambiguity failure reproduction",
}

_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    n = report.user_properties and dict(report.user_properties).get("criterion")
    if not n:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        elif all(o == "skipped" for o in got):
            status = "SKIPPED"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n} ({title}): {status}")
