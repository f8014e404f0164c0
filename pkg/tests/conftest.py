import pytest

_results: dict[int, list[str]] = {}
_titles: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    _titles[n] = title
    if rep.when == "call" or rep.failed or (rep.when == "setup" and rep.skipped):
        _results.setdefault(n, []).append("passed" if rep.passed else rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status = "PASS" if all(r == "passed" for r in _results[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {_titles[n]}")
