import pytest

_CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collect one pass/fail line per acceptance criterion for the summary."""

    def _log(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} - {detail}"
        _CRITERION_LINES.append((number, line))
        print(line)

    return _log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERION_LINES):
            terminalreporter.write_line(line)
