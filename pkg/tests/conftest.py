import pytest

_LINES: list[str] = []


@pytest.fixture
def emit(capsys):
    """Print an acceptance line live and repeat it in the terminal summary."""
    def _emit(line: str) -> None:
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
    return _emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
