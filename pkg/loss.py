"""
Loss.py

Four-term objective L = w_l L_l + w_pl L_pl + w_rec L_rec + w_adv L_adv and
the discriminator objective L_D.
"""
import collections
import logging

import torch

from network import tensor_engine as te
from network.mynn import freeze_weights, unfreeze_weights
from utils.errors import ContractError, NumericError


ADV_CLAMP = 1e-12
TERMS = ('L_l', 'L_pl', 'L_rec', 'L_adv')


class LossBreakdown(collections.namedtuple('LossBreakdown',
                                           ['L_l', 'L_pl', 'L_rec', 'L_adv', 'adv_terms', 'L_D', 'total'])):
    """
    Scalar tensors of one step. adv_terms maps stream -> generator-side term;
    L_D is the discriminator objective and is not part of total.
    """

    def as_floats(self):
        out = collections.OrderedDict((k, float(getattr(self, k))) for k in TERMS)
        out['L_D'] = float(self.L_D)
        out['total'] = float(self.total)
        return out


def _zero():
    return torch.zeros((), dtype=te.DTYPE)


def loss_labeled(pred_o, pred_t, y):
    """
    CE of both labeled heads against the one-hot labels
    """
    if pred_o.shape[0] != pred_t.shape[0] or pred_o.shape[0] != y.shape[0]:
        raise ContractError('loss_labeled: batch sizes differ ({}, {}, {})'.format(
            pred_o.shape[0], pred_t.shape[0], y.shape[0]))
    return te.cross_entropy(pred_o, y) + te.cross_entropy(pred_t, y)


def loss_pseudo(pred_u, y_pseudo):
    return te.cross_entropy(pred_u, y_pseudo)


def loss_reconstruction(x_o, xhat_o, x_t, xhat_t, x_u=None, xhat_u=None):
    out = te.mse(x_o, xhat_o) + te.mse(x_t, xhat_t)
    if x_u is not None:
        out = out + te.mse(x_u, xhat_u)
    return out


def _check_prob(name, d):
    if not bool(torch.isfinite(d).all()) or bool((d < 0).any()) or bool((d > 1).any()):
        raise ContractError('{}: discriminator outputs must lie in [0, 1]'.format(name))


def loss_adversarial(d_real, d_fake):
    """
    d_real / d_fake: {stream: (batch, 1) discriminator outputs}

    Returns (L_D, L_G, per-stream L_G terms):
      L_D = sum_i -mean[log d_real + log(1 - d_fake)]
      L_G = sum_i -mean[log d_fake]   (non-saturating)
    """
    l_d = _zero()
    l_g = _zero()
    terms = collections.OrderedDict()
    for stream in d_real:
        real, fake = d_real[stream], d_fake[stream]
        _check_prob('loss_adversarial[{}] real'.format(stream), real)
        _check_prob('loss_adversarial[{}] fake'.format(stream), fake)
        real = real.clamp(ADV_CLAMP, 1.0 - ADV_CLAMP)
        fake = fake.clamp(ADV_CLAMP, 1.0 - ADV_CLAMP)
        l_d = l_d - (torch.log(real) + torch.log(1.0 - fake)).mean()
        terms[stream] = -torch.log(fake).mean()
        l_g = l_g + terms[stream]
    return l_d, l_g, terms


def total_loss(parts, weights):
    """
    Weighted sum of the four terms; `weights` is cfg.LOSS
    """
    w = {'L_l': weights.W_L, 'L_pl': weights.W_PL, 'L_rec': weights.W_REC, 'L_adv': weights.W_ADV}
    total = _zero()
    for name in TERMS:
        value = parts[name]
        if not bool(torch.isfinite(value).all()):
            raise NumericError('total_loss: term {} is not finite ({})'.format(name, float(value)))
        total = total + w[name] * value
    return total


def compute_losses(net, out, batch, weights, use_lp=True):
    """
    Assemble a LossBreakdown from a forward_full output.

    batch: dict with x_o, x_t, y (one-hot) and optionally x_u, y_u (pseudo rows)
    """
    parts = {'L_l': loss_labeled(out['pred']['o'], out['pred']['t'], batch['y'])}
    has_u = batch.get('x_u') is not None
    if use_lp and has_u:
        parts['L_pl'] = loss_pseudo(out['pred']['u'], batch['y_u'])
    else:
        parts['L_pl'] = _zero()
    parts['L_rec'] = loss_reconstruction(batch['x_o'], out['recon']['o'], batch['x_t'], out['recon']['t'],
                                         batch.get('x_u'), out['recon'].get('u'))
    adv_terms = collections.OrderedDict()
    l_d = _zero()
    if net.sa_enabled:
        # discriminators stay fixed on the generator side
        freeze_weights(net.discriminators)
        d_real, d_fake = {}, {}
        for stream, (z_real, z_fake) in out['sa'].items():
            disc = net.discriminators[stream]
            d_real[stream] = disc(z_real.detach())
            d_fake[stream] = disc(z_fake)
        _, parts['L_adv'], adv_terms = loss_adversarial(d_real, d_fake)
    else:
        parts['L_adv'] = _zero()
    total = total_loss(parts, weights)
    return LossBreakdown(parts['L_l'], parts['L_pl'], parts['L_rec'], parts['L_adv'], adv_terms, l_d, total)


def discriminator_loss(net, out):
    """
    L_D on detached SA streams so only the discriminators receive gradient
    """
    if not net.sa_enabled:
        return _zero()
    unfreeze_weights(net.discriminators)
    d_real, d_fake = {}, {}
    for stream, (z_real, z_fake) in out['sa'].items():
        disc = net.discriminators[stream]
        d_real[stream] = disc(z_real.detach())
        d_fake[stream] = disc(z_fake.detach())
    l_d, _, _ = loss_adversarial(d_real, d_fake)
    logging.debug('L_D = %.6f', float(l_d))
    return l_d
