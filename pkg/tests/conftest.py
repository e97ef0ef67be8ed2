import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def central_diff(f, x, h=1e-6, idx=None):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place perturbation)."""
    flat = x.reshape(-1)
    coords = range(flat.size) if idx is None else idx
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
