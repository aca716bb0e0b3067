from __future__ import annotations

import pytest

ACCEPTANCE_CRITERIA = 13
_verdicts: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        _verdicts[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, ACCEPTANCE_CRITERIA + 1):
        terminalreporter.write_line(_verdicts.get(k, f"criterion {k:2d}: FAIL  (not run in this session or errored)"))
