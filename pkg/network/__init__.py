"""
Network Initializations
"""

import logging
import importlib

from network.mynn import settings_from_cfg
from network.xmodalnet import ModalityShape


ARCHS = {
    'xmodalnet': 'network.xmodalnet.XModalNet',
    'dae': 'network.baseline.UnimodalDAE',
}


def shape_from_cfg(config):
    return ModalityShape(d1=config.SCENE.BANDS_LO, d2=config.SCENE.BANDS_HI,
                         patch=config.MODEL.PATCH, num_classes=config.SCENE.NUM_CLASSES)


def get_net(config, arch='xmodalnet'):
    """
    Get Network Architecture based on the config
    """
    net = get_model(ARCHS.get(arch, arch), shape=shape_from_cfg(config),
                    settings=settings_from_cfg(config.MODEL),
                    il=config.MODEL.IL, sa=config.MODEL.SA, leaky_slope=config.MODEL.LEAKY_SLOPE)
    num_params = sum([param.nelement() for param in net.parameters()])
    logging.info('{} params = {:2.3f}M'.format(type(net).__name__, num_params / 1000000))
    return net


def get_model(network, **kwargs):
    """
    Fetch Network Function Pointer
    """
    module = network[:network.rfind('.')]
    model = network[network.rfind('.') + 1:]
    mod = importlib.import_module(module)
    net_func = getattr(mod, model)
    return net_func(**kwargs)
