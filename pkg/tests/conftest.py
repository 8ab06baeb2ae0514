import numpy as np
import pytest

from discover import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.get_tape().reset()
    yield
    ad.get_tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Independent float64 central-difference gradient of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        gflat[i] = (fp - fm) / (2 * h)
    return g


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
