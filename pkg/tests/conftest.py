import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record and print one PASS/FAIL line per acceptance criterion."""
    def report(number: str, name: str, ok: bool, detail: str = "") -> bool:
        line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
