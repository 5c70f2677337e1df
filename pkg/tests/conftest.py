import numpy as np
import pytest

from relrank.data import SyntheticSpec, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Brightness data at 1x8x8, small enough for many quick training runs."""
    ds, manifest = generate_synthetic(SyntheticSpec(kind="brightness", n_images=40, image_size=8,
                                                    n_train_pairs=60, n_test_pairs=30, seed=3))
    return ds, manifest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar f at x by central differences (mutates and restores x)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
