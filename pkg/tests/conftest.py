import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(num: int, ok: bool, detail: str) -> None:
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[num] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_LINES):
            terminalreporter.write_line(_LINES[num])
