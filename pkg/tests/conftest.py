import numpy as np
import pytest

from mpqte.data import MatchedSample
from mpqte.simulation import DgpSpec, generate


def random_mpd(n, rng, d_x=1, ties=False):
    """A matched-pairs sample with consecutive units paired and a random coin per pair."""
    y = rng.normal(size=2 * n)
    if ties:
        y = np.round(y, 0)
    x = rng.uniform(size=(2 * n, d_x))
    a = np.zeros(2 * n, dtype=int)
    first = rng.integers(0, 2, size=n)
    a[2 * np.arange(n) + (1 - first)] = 1
    pairs = np.arange(2 * n).reshape(n, 2)
    return MatchedSample.from_arrays(y, x, a, pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def m1_sample():
    return generate(DgpSpec("M1", 100), np.random.default_rng(7)).sample


# Acceptance lines collected by test_acceptance.py and printed after the run.
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
