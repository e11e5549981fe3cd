import logging

import numpy as np
import pytest
import scipy.sparse as sp


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("cskf").setLevel(logging.ERROR)
    yield


def random_spd(n, rng, density=0.1, shift=1.0):
    """Sparse SPD matrix: random sparse J^T J plus a diagonal shift."""
    J = sp.random(n + 5, n, density=density, random_state=np.random.RandomState(rng.integers(2**31)))
    return (J.T @ J + shift * sp.identity(n)).tocsc()


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test if it did not pass."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
