from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "slow: long-running test")


@pytest.fixture
def measure(request):
    """Record a named measurement for the acceptance summary."""
    def _add(key, value):
        request.node.user_properties.append((key, value))
    return _add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    entry = _RESULTS.setdefault(num, {"title": title, "passed": True, "notes": []})
    if rep.failed:
        entry["passed"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry["notes"].append(f"{item.name}: {msg.splitlines()[0][:160]}")
    elif rep.when == "call":
        entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        e = _RESULTS[num]
        tr.write_line(f"[{'PASS' if e['passed'] else 'FAIL'}] criterion {num}: {e['title']}")
        for note in e["notes"]:
            tr.write_line(f"        {note}")
