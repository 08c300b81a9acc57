"""Shared test plumbing: the acceptance summary printed at the end of a run."""

import pytest

# criterion number -> {title, outcomes, details}
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


@pytest.fixture
def criterion_detail(request):
    """Let an acceptance test attach a one-line measurement summary."""
    marker = request.node.get_closest_marker("criterion")
    notes = []
    yield notes.append
    if marker is not None and notes:
        _entry(marker)["details"].extend(notes)


def _entry(marker):
    n, title = marker.args
    return ACCEPTANCE.setdefault(n, {"title": title, "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        # an xfail reports as skipped, so it counts as a failure of its criterion
        _entry(marker)["outcomes"].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        e = ACCEPTANCE[n]
        status = "NOT RUN" if not e["outcomes"] else "PASS" if all(e["outcomes"]) else "FAIL"
        line = f"criterion {n:2d} {status:4s} {e['title']}"
        if e["details"]:
            line += " [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
