import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    entry = item.config._criteria.setdefault(marker.args[0], {"ok": True, "notes": []})
    entry["ok"] &= rep.passed
    entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)
    if rep.failed:
        entry["notes"].append(f"FAILED {item.name}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria):
        entry = config._criteria[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  " + "; ".join(entry["notes"]))
