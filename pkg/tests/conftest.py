from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

_RESULTS: list[str] = []


@contextmanager
def _timed(label: str, limit_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException as err:
        if isinstance(err, pytest.skip.Exception):
            _record(f"SKIP  {label}: {err}")
        else:
            _record(f"FAIL  {label} ({type(err).__name__})")
        raise
    elapsed = time.perf_counter() - start
    if elapsed >= limit_s:
        _record(f"FAIL  {label} ({elapsed:.2f}s, limit {limit_s:g}s)")
        pytest.fail(f"{label} took {elapsed:.2f}s, limit {limit_s:g}s")
    _record(f"PASS  {label} ({elapsed:.2f}s, limit {limit_s:g}s)")


def _record(line: str) -> None:
    _RESULTS.append(line)
    print(line)


@pytest.fixture
def criterion():
    """``with criterion("label", limit_s):`` times the block and logs one PASS/FAIL line."""
    return _timed


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
