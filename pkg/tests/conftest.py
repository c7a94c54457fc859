"""Collects acceptance verdicts and prints them after the session."""
import pytest

ACCEPTANCE = {}


@pytest.fixture
def verdict():
    def record(number, name, ok, detail=""):
        ACCEPTANCE[number] = (name, bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}")
