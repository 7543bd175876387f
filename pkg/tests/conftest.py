import numpy as np
import pytest

from svfbilevel.bench import corpus_dir
from svfbilevel.dsl import load_problem

# Example point: global solution plus the lower stationary reference point
XBAR = np.array([0.0])
YBAR = np.array([-2.0, 0.0])
UBAR = np.array([2.5, 1.5])
SBAR = np.array([5 / 8, 0.0, 0.0])

MINIMAL = "var x[1]; var y[1]; upper{ minimize x[1]^2 + y[1]^2; } lower{ minimize (y[1]-x[1])^2; }"


def load(name):
    return load_problem(corpus_dir() / f"{name}.blp")


@pytest.fixture(scope="session")
def iso():
    return load("IsolatedPointCounterexample")


@pytest.fixture(scope="session")
def corpus_problems():
    return [load_problem(p) for p in sorted(corpus_dir().glob("*.blp"))]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
