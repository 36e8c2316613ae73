"""Acceptance-criterion registry: one PASS/FAIL line per criterion at the end of the run."""

import pytest

CRITERIA = {
    1: "default-box counts 5,820 / 8,732, ratio 33.3% +/- 0.1%",
    2: "box scales within 1e-12",
    3: "finite-difference gradients, rel. err <= 1e-4, >= 100 trials",
    4: "fusion algebra bit-exact",
    5: "focal loss values",
    6: "evaluation equals brute-force oracle",
    7: "quantization round trip, payload, int-vs-simulated agreement",
    8: "trend: fusion beats both single streams, day/night directions",
    9: "FWN responsiveness: Spearman(lambda, w_c) > 0.5",
    10: "improved vs original boxes: LAMR within 2 points, >= 20% fewer MACs",
    11: "determinism: byte-identical runs and resume",
    12: "README documents the non-reproduced reference results",
}

_status: dict = {}
_notes: dict = {}
_items: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _items[item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    n = _items.get(report.nodeid)
    if n is None:
        return
    if report.failed:
        _status[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _status.setdefault(n, "PASS")
    elif report.skipped:
        _status.setdefault(n, "SKIP")


@pytest.fixture
def note(request):
    """Record a measured value next to the test's criterion in the summary."""
    n = request.node.get_closest_marker("criterion").args[0]
    return lambda text: _notes.setdefault(n, []).append(text)


def pytest_terminal_summary(terminalreporter):
    if not _items:
        return
    wanted = set(_items.values())
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in wanted:
            continue
        line = f"criterion {n:2d}: {_status.get(n, 'NOT RUN'):7s} {title}"
        if _notes.get(n):
            line += "  [" + "; ".join(_notes[n]) + "]"
        terminalreporter.write_line(line)
