import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Store the pass/fail line of an acceptance criterion for the terminal summary."""
    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(ACCEPTANCE[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
