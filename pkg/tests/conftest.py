import numpy as np
import pytest

from semistereo.similarity import BANNED, SimilarityMatrix, band_mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_band(rng, width, d_max, low=-1.0, high=1.0):
    mask = band_mask(width, d_max)
    values = np.where(mask, rng.uniform(low, high, (width, width)), BANNED)
    return SimilarityMatrix(values, mask, d_max)


def central_difference(f, x, h=1e-3, index=None):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    indices = [index] if index is not None else list(np.ndindex(x.shape))
    for idx in indices:
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
