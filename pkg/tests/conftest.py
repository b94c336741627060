import pytest

# criterion number -> (outcome, title, note)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion carried by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    note = getattr(item, "criterion_note", "")
    verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[num] = (verdict, title, note)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        verdict, title, note = _CRITERIA[num]
        line = f"criterion {num}: {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{note}]" if note else ""))
