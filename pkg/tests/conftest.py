import numpy as np
import pytest

from fmselect.data_io import DatasetTable

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_registry(tmp_path_factory):
    """Registry with an ``mnist`` entry: full MNIST from $FMSELECT_MNIST_DIR, else the 5k sample."""
    pytest.importorskip("mlxtend")
    from fmselect.bundled import write_registry

    return write_registry(tmp_path_factory.mktemp("mnist"))


def make_blobs(n=200, d=12, n_classes=3, informative=3, seed=0, name="blobs"):
    """Labelled data where only the first ``informative`` columns carry class signal."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    x = rng.uniform(0.0, 1.0, size=(n, d))
    centers = rng.uniform(0.1, 0.9, size=(n_classes, informative))
    x[:, :informative] = np.clip(centers[y] + 0.05 * rng.standard_normal((n, informative)), 0, 1)
    return DatasetTable(name=name, features=x, labels=y, n_classes=n_classes)


@pytest.fixture
def blobs():
    return make_blobs()
