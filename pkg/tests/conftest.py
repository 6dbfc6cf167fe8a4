import pytest

# Outcome of each acceptance criterion, filled by the report hook below and
# printed as one line per criterion at the end of the run.
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, text): acceptance criterion exercised by a test"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    text = marker.args[1] if len(marker.args) > 1 else ""
    if rep.when == "call":
        _criteria[n] = (rep.passed, text)
    elif rep.when == "setup" and not rep.passed:
        # fixture failures count against the criterion too
        _criteria[n] = (False, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        passed, text = _criteria[n]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
