import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, then assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
