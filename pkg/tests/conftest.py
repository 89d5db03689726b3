import pytest

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    # a criterion fails if setup, call or teardown fails
    if report.failed:
        _criteria[number] = ("FAIL", title, detail or report.longreprtext.strip().splitlines()[-1])
    elif report.when == "call" and number not in _criteria:
        _criteria[number] = ("PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
