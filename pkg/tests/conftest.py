"""Per-criterion PASS/FAIL summary for the acceptance suite.

Acceptance tests carry ``@pytest.mark.criterion(n, "title")``; a criterion
passes when every test carrying its number passed.  Tests may attach a
short measured detail through the ``measured`` fixture.
"""

from __future__ import annotations

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def measured(request):
    marker = request.node.get_closest_marker("criterion")
    details: list[str] = []
    yield details.append
    if marker is not None:
        _results.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "details": []})["details"] += details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    entry = _results.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "details": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        line = f"criterion {n:2d} {'PASS' if r['ok'] else 'FAIL'}  {r['title']}"
        if r["details"]:
            line += "  [" + "; ".join(r["details"]) + "]"
        tr.write_line(line)
