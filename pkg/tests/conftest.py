import pytest

# filled by tests/test_acceptance.py: (criterion number, passed, detail)
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints a verdict, then asserts it."""
    def record(number: int, ok: bool, detail: str) -> None:
        ok = bool(ok)
        ACCEPTANCE_LINES.append((number, ok, detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"
    return record
