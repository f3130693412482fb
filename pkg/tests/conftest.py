import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = os.environ.get("TRIMTRAIN_MNIST", "/root/data/mnist")


def _has_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or \
        os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


@pytest.fixture(scope="session")
def mnist_dir():
    if not _has_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set TRIMTRAIN_MNIST)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from trimtrain.data import load_mnist
    return load_mnist(mnist_dir, "train"), load_mnist(mnist_dir, "test")


@pytest.fixture
def rng():
    from trimtrain.tensor_core import Rng
    return Rng(1234)


def assert_close(a, b, atol=1e-12):
    np.testing.assert_allclose(a, b, rtol=0, atol=atol)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append one summary line per criterion; printed after the run."""
    def record(n, passed, detail):
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
