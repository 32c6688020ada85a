import numpy as np
import pytest

from nsce.stream import Sample


def gaussian_samples(n_classes=2, n_per_class=100, d=4, spread=5.0, seed=0):
    """Well-separated isotropic clusters, class-ordered."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(n_classes, d))
    out = []
    for c in range(n_classes):
        for x in centers[c] + rng.normal(size=(n_per_class, d)):
            out.append(Sample(x, c))
    return out


@pytest.fixture
def two_class_samples():
    return gaussian_samples()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
