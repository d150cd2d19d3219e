import numpy as np
import pytest

from cwf.fb import build_basis


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def basis16():
    return build_basis(16)


@pytest.fixture(scope="session")
def basis32():
    return build_basis(32)


def gaussian_blobs(L, n, rng, width=(1.5, 3.0), spread=0.25):
    """Smooth random images (sums of Gaussian blobs) that are nearly band-limited."""
    t = np.arange(L) - L // 2
    out = np.zeros((n, L, L))
    for i in range(n):
        for _ in range(4):
            cx, cy = rng.uniform(-spread * L, spread * L, 2)
            s = rng.uniform(*width)
            out[i] += rng.uniform(0.5, 1.5) * np.exp(-((t[None, :] - cx) ** 2 + (t[:, None] - cy) ** 2) / (2 * s * s))
    return out


# one line per acceptance criterion, printed at the end of the session
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
