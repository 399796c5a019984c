import pytest

CRITERIA = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
        CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
