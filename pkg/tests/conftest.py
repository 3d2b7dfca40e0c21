import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Collects the one-line verdict of an acceptance criterion."""

    def _record(line):
        print(line)
        ACCEPTANCE_LINES.append(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
