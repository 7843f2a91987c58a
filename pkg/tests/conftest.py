import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from config import assert_and_infer_cfg, get_cfg_defaults, merge_overrides  # noqa: E402
from datasets.synthetic import SyntheticSceneSpec, generate_scene  # noqa: E402
from network.mynn import LayerSettings  # noqa: E402
from network.tensor_engine import RngState  # noqa: E402
from network.xmodalnet import ModalityShape, XModalNet, init_params  # noqa: E402


TINY = {
    'scene.height': 12,
    'scene.width': 12,
    'scene.num_classes': 3,
    'scene.bands_hi': 16,
    'scene.bands_lo': 4,
    'scene.label_fraction': 0.2,
    'scene.unlabeled_fraction': 0.3,
    'scene.min_per_class': 2,
    'scene.seed': 7,
    'model.patch': 3,
    'optim.batch_size': 8,
    'optim.epochs': 2,
    'optim.rounds': 2,
    'optim.pretrain_epochs': 1,
    'lp.sigma_grid': '0.1,1,10',
    'lp.folds': 2,
    'run.tensorboard': 'off',
}


def tiny_config(overrides=None):
    config = get_cfg_defaults()
    merge_overrides(config, TINY)
    merge_overrides(config, overrides or {})
    return assert_and_infer_cfg(config)


@pytest.fixture
def seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield 0


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope='session')
def tiny_scene():
    return generate_scene(SyntheticSceneSpec.from_cfg(tiny_config().SCENE))


@pytest.fixture
def micro_shape():
    return ModalityShape(d1=2, d2=5, patch=3, num_classes=2)


@pytest.fixture
def micro_net(micro_shape):
    """
    Micro network without dropout so repeated forwards agree
    """
    settings = LayerSettings(bn=True, dropout=0.0, eps=1e-5, momentum=0.99)
    return init_params(XModalNet(micro_shape, settings), RngState(3))
