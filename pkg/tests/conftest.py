"""Shared fixtures; acceptance verdicts are echoed in the terminal summary."""

import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one line, then asserts ``ok``."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        VERDICTS.append((n, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for _, line in sorted(VERDICTS, key=lambda v: v[0]):
            terminalreporter.write_line(line)
