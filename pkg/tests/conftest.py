import numpy as np
import pytest

from idsfit import ModelSpec, SimScenario, StreamScenario
from idsfit.formula import INTERCEPT

BREAKS = (0.0, 50.0, 100.0, 150.0, 200.0)


def ids1_scenario(n_ds=100, n_pc=300, sigma_pc=70.0, stream="pc", trunc=200.0):
    return SimScenario(
        streams={
            "ds": StreamScenario(n_ds, {INTERCEPT: np.log(100.0)}, breaks=BREAKS),
            stream: StreamScenario(n_pc, {INTERCEPT: np.log(sigma_pc)}, trunc=trunc),
        },
        beta={INTERCEPT: 0.0},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def ids1():
    return ids1_scenario()


@pytest.fixture
def ids1_spec():
    return ModelSpec(breaks=BREAKS)


ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    """Keep a one-line verdict for the terminal summary and echo it immediately."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
