import time
from contextlib import contextmanager

import pytest

_LINES = []


class Checks:
    def __init__(self):
        self.failures = []
        self.notes = []

    def expect(self, ok, what):
        (self.notes if ok else self.failures).append(what)
        return ok

    def note(self, what):
        self.notes.append(what)


@contextmanager
def _criterion(num, title):
    c = Checks()
    t0 = time.perf_counter()
    err = None
    try:
        yield c
    except Exception as exc:  # still report a line, then let pytest see the error
        err = exc
        raise
    finally:
        took = time.perf_counter() - t0
        ok = err is None and not c.failures
        detail = "; ".join(c.failures if c.failures else c.notes)
        if err is not None:
            detail = f"{type(err).__name__}: {err}"
        line = f"criterion {num} {'PASS' if ok else 'FAIL'} [{title}] {took:.1f}s :: {detail}"
        _LINES.append(line)
        print(line)
    assert not c.failures, c.failures


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
