import numpy as np
import pytest

from iamlab import autograd as ag


@pytest.fixture(autouse=True)
def _finite_guard():
    with ag.debug_mode(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
