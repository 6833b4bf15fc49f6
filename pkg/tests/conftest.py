import numpy as np
import pytest

from glassmat.dataset import load_dataset
from glassmat.envmap import procedural
from glassmat.oracle import SyntheticScene, generate_dataset
from glassmat.sdf import Sphere


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Sphere (IOR 1.4723), 6 views of 32x32 pixels."""
    out = tmp_path_factory.mktemp("tiny_sphere")
    scene = SyntheticScene(Sphere(), procedural("gradient", 64, 32), 1.4723)
    generate_dataset(scene, 6, out, resolution=32, seed=0)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
