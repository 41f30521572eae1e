import pytest

_criteria: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        notes = [v for k, v in item.user_properties if k == "summary"]
        _criteria.setdefault(marker.args[0], []).append(
            (item.name, report.outcome, "; ".join(notes)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        rows = _criteria[n]
        ok = all(outcome == "passed" for _, outcome, _ in rows)
        notes = "; ".join(note for _, _, note in rows if note)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {notes}")
