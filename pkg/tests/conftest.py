import pytest

VERDICTS: list[str] = []


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line; the caller still asserts."""
    def emit(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label:<40} {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
