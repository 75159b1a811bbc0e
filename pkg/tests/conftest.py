import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fovea.dataio import ClassInfo, ClassTable  # noqa: E402


@pytest.fixture
def table():
    return ClassTable((
        ClassInfo(0, "road", "flat"),
        ClassInfo(1, "car", "vehicle", avg_size=16.0),
        ClassInfo(2, "truck", "vehicle", avg_size=40.0),
        ClassInfo(3, "person", "human", avg_size=8.0),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
