"""
``fcnn`` testing!!
"""
import numpy as np
import pytest

import fcnn
from fcnn import SceneConfig, build_dataset


def pytest_addoption(parser):
    parser.addoption("--ll", action="store", dest='loglevel',
                     default=None, help="logging level to set when testing")


@pytest.fixture(scope='session', autouse=True)
def loglevel(request):
    orig = fcnn.log._default_loglevel
    level = fcnn.log._default_loglevel = request.config.option.loglevel
    yield level
    fcnn.log._default_loglevel = orig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """Four small scenes, three for training and one for testing.
    """
    root = tmp_path_factory.mktemp('scenes')
    base = SceneConfig(height=64, width=64, frames=6, density=2.0)
    return build_dataset(
        str(root), n_scenes=4, clips_per_scene=1,
        split={'train': 0.75, 'test': 0.25}, seed=7, base=base, workers=2)
