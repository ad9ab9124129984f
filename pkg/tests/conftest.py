import numpy as np
import pytest

_ACCEPTANCE = {}


class _Recorder:
    def __call__(self, criterion, passed, detail=""):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _ACCEPTANCE[criterion] = line
        print(line)
        return passed


@pytest.fixture
def acceptance():
    """Record a pass/fail line for the terminal summary."""
    return _Recorder()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=str):
        terminalreporter.write_line(_ACCEPTANCE[key])
