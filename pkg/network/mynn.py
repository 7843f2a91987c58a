"""
Layer wrappers over the tensor engine, switchable BN/dropout and weight init
"""
import collections
import math

import torch
import torch.nn as nn

from network import tensor_engine as te


# bn: use batch norm; dropout: rate (0 disables); eps/momentum: batch norm constants
LayerSettings = collections.namedtuple('LayerSettings', ['bn', 'dropout', 'eps', 'momentum'])


def settings_from_cfg(model_cfg):
    return LayerSettings(bn=bool(model_cfg.BN),
                         dropout=float(model_cfg.DROPOUT_RATE) if model_cfg.DROPOUT else 0.0,
                         eps=float(model_cfg.BN_EPS),
                         momentum=float(model_cfg.BN_MOMENTUM))


DEFAULT_SETTINGS = LayerSettings(bn=True, dropout=0.5, eps=1e-5, momentum=0.99)


class Linear(nn.Module):

    def __init__(self, in_features, out_features):
        super(Linear, self).__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.zeros(out_features, in_features, dtype=te.DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=te.DTYPE))

    def forward(self, x):
        return te.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    """
    'same'-padded convolution with bias
    """

    def __init__(self, in_channels, out_channels, kernel_size):
        super(Conv2d, self).__init__()
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.zeros(out_channels, in_channels, kernel_size, kernel_size,
                                               dtype=te.DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=te.DTYPE))

    def forward(self, x):
        return te.conv2d(x, self.weight, self.bias)


class BatchNorm(nn.Module):
    """
    Batch norm over (batch, f) or (batch, ch, h, w) inputs
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.99):
        super(BatchNorm, self).__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features, dtype=te.DTYPE))
        self.bias = nn.Parameter(torch.zeros(num_features, dtype=te.DTYPE))
        self.register_buffer('running_mean', torch.zeros(num_features, dtype=te.DTYPE))
        self.register_buffer('running_var', torch.ones(num_features, dtype=te.DTYPE))

    def reset_parameters(self):
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()
            self.running_mean.zero_()
            self.running_var.fill_(1.0)

    def forward(self, x):
        return te.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, momentum=self.momentum, eps=self.eps)


class Dropout(nn.Module):
    """
    Dropout drawing its masks from the RngState handed over by set_rng
    """

    def __init__(self, rate):
        super(Dropout, self).__init__()
        self.rate = rate
        self.rng = None

    def forward(self, x):
        return te.dropout(x, self.rate, self.training, self.rng)


class Tanh(nn.Module):
    def forward(self, x):
        return te.tanh(x)


class Sigmoid(nn.Module):
    def forward(self, x):
        return te.sigmoid(x)


class LeakyReLU(nn.Module):
    def __init__(self, slope=0.2):
        super(LeakyReLU, self).__init__()
        self.slope = slope

    def forward(self, x):
        return te.leaky_relu(x, self.slope)


def Norm(num_features, settings):
    """
    Batch norm or a pass-through, depending on the BN toggle
    """
    if settings.bn:
        return BatchNorm(num_features, eps=settings.eps, momentum=settings.momentum)
    return nn.Identity()


def fc_block(in_features, out_features, settings, act='tanh', dropout=True):
    """
    FC + BN + Dropout + activation
    """
    layers = [Linear(in_features, out_features), Norm(out_features, settings)]
    if dropout and settings.dropout > 0:
        layers.append(Dropout(settings.dropout))
    layers.append(_activation(act))
    return nn.Sequential(*layers)


def conv_block(in_channels, out_channels, kernel_size, settings, act='tanh', dropout=True):
    """
    Conv + BN + Dropout + activation
    """
    layers = [Conv2d(in_channels, out_channels, kernel_size), Norm(out_channels, settings)]
    if dropout and settings.dropout > 0:
        layers.append(Dropout(settings.dropout))
    layers.append(_activation(act))
    return nn.Sequential(*layers)


def _activation(act):
    if act == 'tanh':
        return Tanh()
    if act == 'sigmoid':
        return Sigmoid()
    if act == 'none':
        return nn.Identity()
    raise ValueError('unknown activation {}'.format(act))


def set_rng(model, rng):
    """
    Point every dropout layer of `model` at `rng`
    """
    for module in model.modules():
        if isinstance(module, Dropout):
            module.rng = rng


def freeze_weights(*models):
    for model in models:
        for k in model.parameters():
            k.requires_grad = False


def unfreeze_weights(*models):
    for model in models:
        for k in model.parameters():
            k.requires_grad = True


def _glorot_bound(weight):
    if weight.dim() == 2:
        fan_out, fan_in = weight.shape
    else:
        receptive = weight.shape[2] * weight.shape[3]
        fan_in = weight.shape[1] * receptive
        fan_out = weight.shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def initialize_weights(*models, **kwargs):
    """
    Glorot-uniform weights, zero biases, BN gamma=1 beta=0.
    Pass rng=RngState for reproducible draws.
    """
    rng = kwargs.get('rng')
    generator = rng.generator if rng is not None else None
    for model in models:
        for module in model.modules():
            if isinstance(module, (Linear, Conv2d)):
                bound = _glorot_bound(module.weight)
                with torch.no_grad():
                    draw = torch.rand(module.weight.shape, generator=generator, dtype=te.DTYPE)
                    module.weight.copy_(draw * 2.0 * bound - bound)
                    module.bias.zero_()
            elif isinstance(module, BatchNorm):
                module.reset_parameters()
