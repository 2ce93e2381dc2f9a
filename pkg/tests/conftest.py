import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion name -> "PASS" / "FAIL", in first-seen order
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.failed:
        _CRITERIA[name] = "FAIL"
    elif rep.skipped:
        _CRITERIA.setdefault(name, "SKIP")
    elif rep.when == "call":
        _CRITERIA.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in _CRITERIA.items():
        terminalreporter.write_line(f"{status} {name}")
    passed = sum(s == "PASS" for s in _CRITERIA.values())
    terminalreporter.write_line(f"{passed}/{len(_CRITERIA)} criteria passed")
