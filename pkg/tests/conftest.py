import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str):
    """Store one acceptance verdict; all verdicts print at the end of the session."""
    ACCEPTANCE_LINES[criterion] = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2}: {detail}"
    print(ACCEPTANCE_LINES[criterion])


@pytest.fixture
def report():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
