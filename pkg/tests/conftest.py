import pytest

from beryllium.testkit import spawn_topology


@pytest.fixture
def thread_topology(tmp_path):
    """Boot an in-process topology; tear it down after the test."""
    started = []

    def boot(spec):
        topo = spawn_topology(spec, workdir=tmp_path / f"topo{len(started)}", mode="thread")
        started.append(topo)
        return topo

    yield boot
    for topo in started:
        topo.teardown()


@pytest.fixture
def process_topology(tmp_path):
    started = []

    def boot(spec):
        topo = spawn_topology(spec, workdir=tmp_path / f"topo{len(started)}", mode="process")
        started.append(topo)
        return topo

    yield boot
    for topo in started:
        topo.teardown()


# -- acceptance reporting ------------------------------------------------------------
# Tests marked ``acceptance(n, title)`` get one PASS/FAIL line in the summary.


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        verdict = "PASS" if report.passed else "FAIL"
        item.config.stash.setdefault(_RESULTS, []).append((number, verdict, title))


_RESULTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, title in sorted(results):
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
