import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from _oracles import ACCEPTANCE_LINES

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

MNIST_DIR = Path(os.environ.get("INCAY_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return all((MNIST_DIR / n).exists() or (MNIST_DIR / (n + ".gz")).exists() for n in names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST not found under {MNIST_DIR} (set INCAY_MNIST_DIR)")
    return MNIST_DIR


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
