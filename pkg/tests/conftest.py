import numpy as np
import pytest

import srnnkit  # noqa: F401  (registers every layer kind)
from srnnkit.params import RnnCellParams, SrnnParams

# hand recurrence: two mirrored geometric decays, centre counted twice
DECAY_ROW = [0.0625, 0.125, 0.25, 0.5, 2.0, 0.5, 0.25, 0.125, 0.0625]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def decay_cell():
    return RnnCellParams.scalar(1.0, 0.5)


@pytest.fixture
def decay_srnn(decay_cell):
    return SrnnParams(decay_cell, decay_cell)


# filled by test_acceptance.py, one "criterion N: PASS|FAIL|SKIP ..." line each
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
