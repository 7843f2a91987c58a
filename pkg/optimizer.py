"""
Pytorch Optimizer and Scheduler Related Task
"""
import collections
import logging
import math

import numpy as np
import torch
from torch import optim

from datasets.container import read_bundle, write_bundle
from utils.errors import ContractError, FormatError, NumericError


def poly_lr(iteration, max_iter, optim_cfg):
    """
    base_lr * (1 - iter / max_iter) ^ power
    """
    if iteration < 0 or iteration > max_iter:
        raise ContractError('poly_lr: iteration {} outside [0, {}]'.format(iteration, max_iter))
    if max_iter == 0:
        return optim_cfg.BASE_LR
    return optim_cfg.BASE_LR * math.pow(1 - iteration / float(max_iter), optim_cfg.POWER)


def get_optimizer(params, optim_cfg, max_iter):
    """
    Adam with the poly schedule over `max_iter` iterations
    """
    optimizer = optim.Adam(params, lr=optim_cfg.BASE_LR, betas=(optim_cfg.BETA1, optim_cfg.BETA2),
                           eps=optim_cfg.EPSILON)
    lambda1 = lambda iteration: math.pow(1 - min(iteration, max_iter) / float(max(max_iter, 1)), optim_cfg.POWER)
    scheduler = optim.lr_scheduler.LambdaLR(optimizer, lr_lambda=lambda1)
    return optimizer, scheduler


def adam_step(optimizer, names=None):
    """
    One Adam update after checking every gradient for NaN/Inf.
    `names` maps id(param) -> readable name for the error message.
    """
    for group in optimizer.param_groups:
        for p in group['params']:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                name = names.get(id(p), 'unnamed') if names else 'unnamed'
                raise NumericError('adam_step: non-finite gradient in parameter {}'.format(name))
    optimizer.step()


def param_names(net):
    return {id(p): n for n, p in net.named_parameters()}


def _optimizer_entries(prefix, optimizer):
    state = optimizer.state_dict()['state']
    out = collections.OrderedDict()
    for idx in sorted(state):
        entry = state[idx]
        out['{}/{}/step'.format(prefix, idx)] = np.asarray(float(entry['step']))
        out['{}/{}/exp_avg'.format(prefix, idx)] = entry['exp_avg']
        out['{}/{}/exp_avg_sq'.format(prefix, idx)] = entry['exp_avg_sq']
    return out


def checkpoint_entries(net, optimizers, iteration, extra=None):
    """
    Ordered name -> array mapping of everything needed to resume
    """
    entries = collections.OrderedDict()
    for name, value in net.state_dict().items():
        entries['net/{}'.format(name)] = value
    for key in sorted(optimizers):
        entries.update(_optimizer_entries('opt/{}'.format(key), optimizers[key]))
    entries['iteration'] = np.asarray(float(iteration))
    for name, value in (extra or {}).items():
        entries[name] = value
    return entries


def save_checkpoint(path, net, optimizers, iteration, extra=None):
    write_bundle(path, checkpoint_entries(net, optimizers, iteration, extra))
    logging.info('Saved checkpoint {} at iteration {}'.format(path, iteration))


def load_checkpoint(path):
    return read_bundle(path)


def _entry_tensor(value):
    """
    Fresh float64 tensor from a checkpoint entry (numpy from disk, torch in memory)
    """
    if torch.is_tensor(value):
        return value.detach().clone().to(torch.float64)
    return torch.from_numpy(np.array(value, dtype=np.float64))


def _restore_optimizer(prefix, optimizer, entries):
    state_dict = optimizer.state_dict()
    state = {}
    for idx in range(sum(len(g['params']) for g in state_dict['param_groups'])):
        key = '{}/{}/'.format(prefix, idx)
        if key + 'step' in entries:
            state[idx] = {
                'step': torch.tensor(float(entries[key + 'step'])),
                'exp_avg': _entry_tensor(entries[key + 'exp_avg']),
                'exp_avg_sq': _entry_tensor(entries[key + 'exp_avg_sq']),
            }
    state_dict['state'] = state
    optimizer.load_state_dict(state_dict)


def load_weights(entries, net):
    """
    Copy the 'net/...' entries of a checkpoint into `net`
    """
    state = net.state_dict()
    missing = [k for k in state if 'net/{}'.format(k) not in entries]
    if missing:
        raise FormatError('checkpoint lacks {}'.format(', '.join(missing[:5])))
    loaded = collections.OrderedDict()
    for k, v in state.items():
        value = _entry_tensor(entries['net/{}'.format(k)]).to(v.dtype)
        if value.shape != v.shape:
            raise FormatError('checkpoint tensor {} has shape {}, expected {}'.format(
                k, tuple(value.shape), tuple(v.shape)))
        loaded[k] = value
    net.load_state_dict(loaded)
    net.initialized = True
    return net


def restore_snapshot(entries, net, optimizers, schedulers, max_iter, optim_cfg):
    """
    Restore weights, optimizer moments and the schedule position for resuming
    a job. Returns the iteration.
    """
    load_weights(entries, net)
    iteration = int(entries['iteration'])
    lr = poly_lr(iteration, max_iter, optim_cfg)
    for key in sorted(optimizers):
        _restore_optimizer('opt/{}'.format(key), optimizers[key], entries)
        for group in optimizers[key].param_groups:
            group['lr'] = lr
        if schedulers and key in schedulers:
            schedulers[key].last_epoch = iteration
    logging.info("Checkpoint Load Complete (iteration {})".format(iteration))
    return iteration
