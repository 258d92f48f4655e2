import numpy as np
import pytest

from slicenet.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(config, items):
    # long training runs go last so quick failures surface first
    items.sort(key=lambda it: 1 if it.get_closest_marker("slow") else 0)


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Recorder for acceptance verdicts; the lines are echoed in the terminal summary."""

    def record(criterion: int, ok: bool, detail: str) -> str:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:>2}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
