import numpy as np
import pytest

from prosumer_coalitions.powermodel import ProductionTrace


def make_traces(rows, prefix="a"):
    return [ProductionTrace(f"{prefix}{i:02d}", np.asarray(r, dtype=float)) for i, r in enumerate(rows)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
