"""Collects the acceptance verdicts and prints them after the run."""

import pytest

_VERDICTS = {}


class _Recorder:
    def __init__(self, number, title):
        self.number, self.title = number, title

    def check(self, ok, detail):
        _VERDICTS[self.number] = (self.title, bool(ok), detail)
        assert ok, f"criterion {self.number} ({self.title}): {detail}"


@pytest.fixture
def criterion():
    return _Recorder


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
