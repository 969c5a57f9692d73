import numpy as np
import pytest

CRITERIA = {
    1: "seed cells match closed forms",
    2: "block-count anchors",
    3: "gradients match finite differences",
    4: "nondominated sort and survivor selection",
    5: "morphism closure",
    6: "function-preserving insertions",
    7: "desk-scale replay",
    8: "replay determinism",
    9: "epoch-budget rule",
    10: "perplexity metric",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {title}")
