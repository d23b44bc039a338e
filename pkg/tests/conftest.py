import math

import numpy as np
import pytest

from qbatt import ChainSpec, ControlSpec

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = mark.args
        entry = item.config.stash[_RESULTS].setdefault(number, {"title": title, "ok": True,
                                                                "notes": []})
        entry["ok"] &= report.passed
        entry["notes"] += [str(v) for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        if entry["notes"]:
            line += "  [" + "; ".join(entry["notes"]) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def xxx2():
    return ChainSpec(n_sites=2, field_strength=1.0, coupling=1.0)


@pytest.fixture
def optimal():
    return ControlSpec.from_chi(1.0, direction=math.pi, eta=1.0)
