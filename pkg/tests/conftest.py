import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eatkit.model import conv2d, dense, flatten, init_model, maxpool2d, relu  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_cnn_layers(cin=1, classes=3):
    """2 conv + maxpool + 2 dense on 8x8 inputs; ~900 parameters."""
    return [
        conv2d(cin, 4, 3, padding=1), relu(), maxpool2d(2),
        conv2d(4, 8, 3, padding=1), relu(), maxpool2d(2),
        flatten(),
        dense(8 * 2 * 2, 16), relu(),
        dense(16, classes),
    ]


@pytest.fixture
def tiny_cnn():
    return init_model(tiny_cnn_layers(), (1, 8, 8), seed=7)

