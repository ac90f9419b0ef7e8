import pytest

# criterion number -> (title, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
