"""Shared fixtures; collects acceptance outcomes for the terminal summary."""

import numpy as np
import pytest

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" -- {detail}"
        print(line)
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return bool(passed)

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
