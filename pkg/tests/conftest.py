"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line each."""

from collections import defaultdict

CRITERIA = {
    1: "secondary-fault counts per backend",
    2: "calibrated syscall latency table and ordering",
    3: "page-fault latency breakdown",
    4: "nested amplification identity",
    5: "functional equivalence on 1000 random traces",
    6: "PCP batching and bounded pager overhead",
    7: "reclamation operation counts",
    8: "gate properties under randomized interleavings",
    9: "huge-page waste oracle and bursty peak ratio",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _outcomes[marker.args[0]].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title} ({len(results or [])} checks)")

