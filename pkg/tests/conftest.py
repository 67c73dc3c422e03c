import numpy as np
import pytest

from eegforest.dataset import SynthConfig, synth_corpus

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria.append((number, title, status))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    merged = {}
    for number, title, status in _criteria:
        prev = merged.get(number, (title, "PASS"))[1]
        worst = max(prev, status, key=["PASS", "SKIP", "FAIL"].index)
        merged[number] = (title, worst)
    terminalreporter.section("acceptance criteria")
    for number in sorted(merged):
        title, status = merged[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(SynthConfig(n_patients=4, duration_s=60, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
