import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one acceptance verdict line; returns the pass flag for asserting."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        return passed

    return record
