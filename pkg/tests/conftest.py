import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ged import dataset


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic corpus shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = dataset.generate_synthetic_corpus(3, seed=7, out_dir=root,
                                                 image_size=(96, 96))
    return manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
