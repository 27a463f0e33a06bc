import pytest

_verdicts = []


@pytest.fixture
def verdict():
    """Record ``(criterion, ok, detail)``; the summary prints one line per criterion."""

    def record(criterion, ok, detail):
        _verdicts.append((criterion, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(_verdicts, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
