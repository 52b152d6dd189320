import numpy as np
import pytest
from hypothesis import settings

from bionas.tensor import set_default_dtype

settings.register_profile("bionas", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("bionas")


@pytest.fixture(autouse=True)
def _float64():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
