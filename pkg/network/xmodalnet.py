"""
Cross-modal network trained on two paired modalities and evaluated on one.

Pathways:
  o  labeled modality-1 patches (CNN stream)
  t  labeled modality-2 spectra (DNN stream), pixel-aligned with o
  u  unlabeled modality-1 patches; every block it shares with o is the same
     module object, so one optimizer step updates both

Layer widths per pathway:
  feature extractor  conv5x5 -> 32, conv3x3 -> 64 (avg-pool to 64) | FC 160, FC 64
  SA module          G1, G2: FC 128, FC 64 each; concat 128; linear 128 -> 64
  IL module          MLP1, MLP2: FC 64, FC 64 each
  prediction         FC 128 (shared o/u), FC 256, FC 64, FC C + softmax
                     (u: FC C + softmax straight after the shared FC 128)
  reconstruction     from the FC 128 block: FC 64, lift, conv3x3 -> 32, conv5x5 -> d1
                     (t: FC 64, FC 160, FC d2), sigmoid output
  discriminators     FC 64, FC 1 + sigmoid, one per pathway
"""
import collections

import torch
import torch.nn as nn

from network import tensor_engine as te
from network.mynn import (Linear, LeakyReLU, Sigmoid, conv_block, fc_block, initialize_weights,
                          set_rng, DEFAULT_SETTINGS)
from utils.errors import ContractError, DimensionError, ParameterError, StateError


STREAMS = ('o', 't', 'u')
SA_WIDTH = 64
IL_WIDTH = 64
TAP_WIDTH = 128
HEAD_INIT_SCALE = 0.1


class ModalityShape(collections.namedtuple('ModalityShape', ['d1', 'd2', 'patch', 'num_classes'])):
    """
    d1: modality-1 channels, d2: modality-2 bands, patch: odd spatial extent,
    num_classes: C
    """

    def validate(self):
        if min(self.d1, self.d2, self.num_classes) < 1:
            raise ParameterError('modality shape extents must be >= 1, got {}'.format(tuple(self)))
        if self.patch < 1 or self.patch % 2 == 0:
            raise ParameterError('patch extent must be odd, got {}'.format(self.patch))
        return self


class ActivationTrace(collections.OrderedDict):
    """
    stream -> OrderedDict(layer name -> activation)
    """

    def record(self, stream, name, value):
        self.setdefault(stream, collections.OrderedDict())[name] = value


def _trace(trace, stream, name, value):
    if trace is not None:
        trace.record(stream, name, value)
    return value


class Modality1Extractor(nn.Module):

    def __init__(self, d1, settings):
        super(Modality1Extractor, self).__init__()
        self.d1 = d1
        self.conv1 = conv_block(d1, 32, 5, settings)
        self.conv2 = conv_block(32, 64, 3, settings)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.d1:
            raise DimensionError('modality-1 extractor', x.shape, (None, self.d1, None, None))
        return te.global_avg_pool(self.conv2(self.conv1(x)))


class Modality2Extractor(nn.Module):

    def __init__(self, d2, settings):
        super(Modality2Extractor, self).__init__()
        self.d2 = d2
        self.fc1 = fc_block(d2, 160, settings)
        self.fc2 = fc_block(160, 64, settings)

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.d2:
            raise DimensionError('modality-2 extractor', x.shape, (None, self.d2))
        return self.fc2(self.fc1(x))


class SAModule(nn.Module):
    """
    Self-adversarial block: G1 yields the feature stream, G2 the adversarial
    stream that the discriminator sees as fake
    """

    def __init__(self, in_features, settings=DEFAULT_SETTINGS):
        super(SAModule, self).__init__()
        self.in_features = in_features
        self.G1 = nn.Sequential(fc_block(in_features, 128, settings), fc_block(128, SA_WIDTH, settings))
        self.G2 = nn.Sequential(fc_block(in_features, 128, settings), fc_block(128, SA_WIDTH, settings))

    def forward(self, x):
        return forward_sa(self, x)


def forward_sa(module, x_sa):
    """
    Returns (z1, z2, [z1, z2])
    """
    if x_sa.dim() != 2 or x_sa.shape[1] != module.in_features:
        raise DimensionError('forward_sa', x_sa.shape, (x_sa.shape[0], module.in_features))
    z1 = module.G1(x_sa)
    z2 = module.G2(x_sa)
    return z1, z2, te.concat(z1, z2, axis=1)


class ILModule(nn.Module):
    """
    Interactive learning: each modality's MLP is also applied to the other
    modality's features and the two responses are summed
    """

    def __init__(self, settings=DEFAULT_SETTINGS):
        super(ILModule, self).__init__()
        self.MLP1 = nn.Sequential(fc_block(IL_WIDTH, IL_WIDTH, settings), fc_block(IL_WIDTH, IL_WIDTH, settings))
        self.MLP2 = nn.Sequential(fc_block(IL_WIDTH, IL_WIDTH, settings), fc_block(IL_WIDTH, IL_WIDTH, settings))

    def half(self, x, modality, interactive=True):
        """
        The part of the output that depends on one modality only:
        MLP_own(x) + MLP_other(x), or MLP_own(x) without interaction
        """
        if x.dim() != 2 or x.shape[1] != IL_WIDTH:
            raise DimensionError('forward_il', x.shape, (x.shape[0], IL_WIDTH))
        own, other = (self.MLP1, self.MLP2) if modality == 1 else (self.MLP2, self.MLP1)
        if not interactive:
            return own(x)
        return te.add(own(x), other(x))

    def forward(self, x1, x2):
        return forward_il(self, x1, x2)


def forward_il(module, x1, x2):
    """
    [MLP1(x1) + MLP2(x1), MLP2(x2) + MLP1(x2)]
    """
    return te.concat(module.half(x1, 1), module.half(x2, 2), axis=1)


class Discriminator(nn.Module):

    def __init__(self, in_features=SA_WIDTH, hidden=64, slope=0.2):
        super(Discriminator, self).__init__()
        self.net = nn.Sequential(Linear(in_features, hidden), LeakyReLU(slope),
                                 Linear(hidden, 1), Sigmoid())

    def forward(self, z):
        return self.net(z)


class PredictionTail(nn.Module):
    """
    Everything after the first (128-wide) prediction block of a labeled pathway
    """

    def __init__(self, num_classes, settings):
        super(PredictionTail, self).__init__()
        self.fc2 = fc_block(TAP_WIDTH, 256, settings)
        self.fc3 = fc_block(256, 64, settings)
        self.cls = Linear(64, num_classes)

    def forward(self, x):
        return te.softmax(self.cls(self.fc3(self.fc2(x))))


class SoftmaxHead(nn.Module):

    def __init__(self, in_features, num_classes):
        super(SoftmaxHead, self).__init__()
        self.cls = Linear(in_features, num_classes)

    def forward(self, x):
        return te.softmax(self.cls(x))


class PatchDecoder(nn.Module):
    """
    Vector -> (d1, p, p) patch with values in (0, 1)
    """

    def __init__(self, in_features, d1, patch, settings, lift_channels=16):
        super(PatchDecoder, self).__init__()
        self.patch = patch
        self.lift_channels = lift_channels
        self.fc = fc_block(in_features, 64, settings, dropout=False)
        self.lift = Linear(64, lift_channels * patch * patch)
        self.conv1 = conv_block(lift_channels, 32, 3, settings, dropout=False)
        self.conv2 = conv_block(32, d1, 5, settings, act='sigmoid', dropout=False)

    def forward(self, x):
        h = self.lift(self.fc(x)).view(-1, self.lift_channels, self.patch, self.patch)
        return self.conv2(self.conv1(h))


class SpectrumDecoder(nn.Module):

    def __init__(self, in_features, d2, settings):
        super(SpectrumDecoder, self).__init__()
        self.net = nn.Sequential(fc_block(in_features, 64, settings, dropout=False),
                                 fc_block(64, 160, settings, dropout=False),
                                 fc_block(160, d2, settings, act='sigmoid', dropout=False))

    def forward(self, x):
        return self.net(x)


class XModalNet(nn.Module):
    """
    Full network. `il` and `sa` switch the interactive and self-adversarial
    modules in the forward pass; the parameter set does not change with them.
    """

    def __init__(self, shape, settings=DEFAULT_SETTINGS, il=True, sa=True, leaky_slope=0.2):
        super(XModalNet, self).__init__()
        self.shape = shape.validate()
        self.settings = settings
        self.il_enabled = il
        self.sa_enabled = sa
        self.initialized = False

        self.extractor1 = Modality1Extractor(shape.d1, settings)
        self.extractor2 = Modality2Extractor(shape.d2, settings)
        self.sa1 = SAModule(64, settings)
        self.sa2 = SAModule(64, settings)
        self.proj1 = Linear(2 * SA_WIDTH, IL_WIDTH)
        self.proj2 = Linear(2 * SA_WIDTH, IL_WIDTH)
        self.il = ILModule(settings)
        self.block1 = fc_block(IL_WIDTH, TAP_WIDTH, settings)
        self.block2 = fc_block(IL_WIDTH, TAP_WIDTH, settings)
        self.tail_o = PredictionTail(shape.num_classes, settings)
        self.tail_t = PredictionTail(shape.num_classes, settings)
        self.head_u = SoftmaxHead(TAP_WIDTH, shape.num_classes)
        self.decoder1 = PatchDecoder(TAP_WIDTH, shape.d1, shape.patch, settings)
        self.decoder2 = SpectrumDecoder(TAP_WIDTH, shape.d2, settings)
        self.discriminators = nn.ModuleDict({s: Discriminator(slope=leaky_slope) for s in STREAMS})

    def stream_blocks(self, stream):
        """
        The modules a pathway runs through, in order
        """
        if stream == 't':
            return collections.OrderedDict([
                ('extractor', self.extractor2), ('sa', self.sa2), ('proj', self.proj2),
                ('il', self.il), ('block', self.block2), ('head', self.tail_t),
                ('decoder', self.decoder2), ('discriminator', self.discriminators['t'])])
        return collections.OrderedDict([
            ('extractor', self.extractor1), ('sa', self.sa1), ('proj', self.proj1),
            ('il', self.il), ('block', self.block1),
            ('head', self.tail_o if stream == 'o' else self.head_u),
            ('decoder', self.decoder1), ('discriminator', self.discriminators[stream])])

    def head_modules(self):
        return [self.tail_o, self.tail_t, self.head_u]

    def discriminator_parameters(self):
        return list(self.discriminators.parameters())

    def generator_parameters(self):
        disc = set(id(p) for p in self.discriminator_parameters())
        return [p for p in self.parameters() if id(p) not in disc]

    def _encode(self, modality, x, stream, trace):
        """
        Extractor + SA (+ projection). Returns (h, z_real, z_fake)
        """
        extractor, sa, proj = ((self.extractor1, self.sa1, self.proj1) if modality == 1
                               else (self.extractor2, self.sa2, self.proj2))
        feats = _trace(trace, stream, 'extractor', extractor(x))
        if self.sa_enabled:
            z1, z2, z_sa = forward_sa(sa, feats)
            _trace(trace, stream, 'sa', z_sa)
            h = proj(z_sa)
        else:
            z1, z2 = sa.G1(feats), None
            h = z1
        _trace(trace, stream, 'sa_real', z1)
        if z2 is not None:
            _trace(trace, stream, 'sa_fake', z2)
        return h, z1, z2

    def _predict(self, modality, half, stream, trace):
        block = self.block1 if modality == 1 else self.block2
        tap = _trace(trace, stream, 'block', block(half))
        if stream == 'o':
            pred = self.tail_o(tap)
        elif stream == 't':
            pred = self.tail_t(tap)
        else:
            pred = self.head_u(tap)
        _trace(trace, stream, 'pred', pred)
        return tap, pred

    def modality1_tap(self, x):
        """
        128-wide first prediction block of the modality-1 pathway
        """
        h, _, _ = self._encode(1, x, 'o', None)
        return self.block1(self.il.half(h, 1, self.il_enabled))

    def reconstruct(self, modality, x):
        """
        Single-modality encoder -> reconstruction pathway
        """
        h, _, _ = self._encode(modality, x, None, None)
        half = self.il.half(h, modality, self.il_enabled)
        if modality == 1:
            return self.decoder1(self.block1(half))
        return self.decoder2(self.block2(half))


def forward_full(net, batch_o, batch_t, batch_u=None, mode='train', rng=None, trace=False):
    """
    Evaluate every head. Returns a dict with
      pred[stream]   class-probability rows (batch x C)
      recon[stream]  reconstructions, same shape as the inputs
      sa[stream]     (z_real, z_fake) pairs; z_fake is None with SA off
      tap[stream]    128-wide first prediction block ('o' and 'u')
      trace          ActivationTrace or None
    """
    if batch_o.shape[0] != batch_t.shape[0]:
        raise ContractError('forward_full: {} modality-1 rows vs {} modality-2 rows are not pixel-aligned'.format(
            batch_o.shape[0], batch_t.shape[0]))
    net.train(mode == 'train')
    set_rng(net, rng)
    tr = ActivationTrace() if trace else None
    out = {'pred': {}, 'recon': {}, 'sa': {}, 'tap': {}, 'trace': tr}

    h_o, zr_o, zf_o = net._encode(1, batch_o, 'o', tr)
    h_t, zr_t, zf_t = net._encode(2, batch_t, 't', tr)
    if net.il_enabled:
        z_il = forward_il(net.il, h_o, h_t)
        _trace(tr, 'o', 'il', z_il)
        half_o, half_t = z_il[:, :IL_WIDTH], z_il[:, IL_WIDTH:]
    else:
        half_o, half_t = net.il.half(h_o, 1, False), net.il.half(h_t, 2, False)
        _trace(tr, 'o', 'il', half_o)
    _trace(tr, 't', 'il', half_t)

    out['tap']['o'], out['pred']['o'] = net._predict(1, half_o, 'o', tr)
    tap_t, out['pred']['t'] = net._predict(2, half_t, 't', tr)
    out['recon']['o'] = net.decoder1(out['tap']['o'])
    out['recon']['t'] = net.decoder2(tap_t)
    out['sa']['o'] = (zr_o, zf_o)
    out['sa']['t'] = (zr_t, zf_t)

    if batch_u is not None:
        h_u, zr_u, zf_u = net._encode(1, batch_u, 'u', tr)
        half_u = _trace(tr, 'u', 'il', net.il.half(h_u, 1, net.il_enabled))
        out['tap']['u'], out['pred']['u'] = net._predict(1, half_u, 'u', tr)
        out['recon']['u'] = net.decoder1(out['tap']['u'])
        out['sa']['u'] = (zr_u, zf_u)
    return out


def forward_inference(net, batch, batch_size=1024):
    """
    Modality-1 only prediction in eval mode; returns class-probability rows
    """
    if not net.initialized:
        raise StateError('forward_inference: network parameters were never initialized or loaded')
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], batch_size):
            x = batch[start:start + batch_size]
            h, _, _ = net._encode(1, x, 'o', None)
            half = net.il.half(h, 1, net.il_enabled)
            outs.append(net.tail_o(net.block1(half)))
    if not outs:
        return torch.zeros(0, net.shape.num_classes, dtype=te.DTYPE)
    return torch.cat(outs, dim=0)


def lp_features(net, patches, batch_size=1024):
    """
    Eval-mode tap activations for label propagation, (N, 128)
    """
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, patches.shape[0], batch_size):
            outs.append(net.modality1_tap(patches[start:start + batch_size]))
    return torch.cat(outs, dim=0)


def init_params(net, rng):
    """
    Glorot-uniform weights, zero biases, unit BN scale. Classifier weights are
    scaled by HEAD_INIT_SCALE so the first predictions sit near uniform.
    """
    initialize_weights(net, rng=rng)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (PredictionTail, SoftmaxHead)):
                m.cls.weight.mul_(HEAD_INIT_SCALE)
    net.initialized = True
    return net
