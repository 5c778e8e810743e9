import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def digits():
    from anyprec.data import load_digits_bundle

    return load_digits_bundle()


MLP_ARCH = """
input 1 1 8
flatten
linear 32
batchnorm
actquant
linear 32
batchnorm
actquant
linear 2
"""

CNN_ARCH = """
input 1 8 8
conv 16 3 1 1
batchnorm
actquant
maxpool 2
conv 32 3 1 1
batchnorm
actquant
maxpool 2
flatten
linear 1024
relu
linear 10
"""


@pytest.fixture
def mlp_arch():
    return MLP_ARCH


@pytest.fixture
def cnn_arch():
    return CNN_ARCH
