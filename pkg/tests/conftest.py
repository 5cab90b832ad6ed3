import pytest

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    _CRITERIA[number] = line
    return line


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line, then assert it."""

    def check(number: int, name: str, passed: bool, detail: str) -> None:
        line = record_criterion(number, name, bool(passed), detail)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
