"""
training code

Multi-round semi-supervised training: DAE pretraining, initial pseudo-labels
from a linear classifier, then rounds of minibatch epochs with a generator
step on the four-term loss and a discriminator step on L_D, each round closed
by a label propagation refresh on the tap-layer features.
"""
from __future__ import absolute_import
from __future__ import division
import collections
import logging
import math
import os
import random
import time

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

import datasets
import label_propagation as lp
import loss
import optimizer
from datasets.sampler import SeededSampler
from datasets.synthetic import raw_pixel_features
from network import tensor_engine as te
from network.baseline import SoftmaxClassifier, UnimodalDAE
from network.mynn import set_rng
from network.xmodalnet import forward_full, forward_inference, init_params, lp_features
from transforms.transforms import MaskingNoise
from utils.errors import DivergenceError
from utils.misc import AverageMeter, evaluate_hist, fast_hist, print_evaluate_results, write_csv


HISTORY_KEYS = ['round', 'epoch', 'L_l', 'L_pl', 'L_rec', 'L_adv', 'L_D', 'total', 'lr']

EvalResult = collections.namedtuple('EvalResult', ['pixel_acc', 'mean_iu', 'iu', 'hist'])


class TrainReport(object):
    """
    history: one OrderedDict per epoch (HISTORY_KEYS)
    changed_counts: pseudo-labels changed per LP refresh
    pretrain_losses: mean reconstruction loss per pretraining epoch
    result: EvalResult on the test split
    """

    def __init__(self, seed):
        self.seed = seed
        self.history = []
        self.changed_counts = []
        self.pretrain_losses = []
        self.sigma = None
        self.iterations = 0
        self.result = None
        self.wall_time = 0.0

    def last_losses(self):
        return self.history[-1] if self.history else None


def set_seeds(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    random.seed(seed)


def _epoch_rng(rng, global_epoch):
    return rng.fork(1000 + global_epoch)


def evaluate(net, scene, split, patch, lo_cube=None, dataset_name=None):
    """
    Pixel accuracy, mIoU, per-class IoU and confusion on one split, through
    the modality-1-only inference path
    """
    ids = scene.ids(split)
    dataset = datasets.make_dataset(scene, ids, patch, with_spectra=False, with_labels=False, lo_cube=lo_cube)
    return evaluate_dataset(net, dataset, scene.num_classes, dataset_name or split)


def evaluate_dataset(net, dataset, num_classes, dataset_name=None, predict=None):
    predict = predict or (lambda x: forward_inference(net, x))
    pred = predict(dataset.patches).argmax(dim=1).numpy()
    hist = fast_hist(pred, dataset.labels.numpy(), num_classes)
    acc, mean_iu, iu = evaluate_hist(hist)
    print_evaluate_results(hist, iu, dataset_name=dataset_name)
    logging.info('{}: pixel acc {:.4f}, mIoU {:.4f}'.format(dataset_name, acc, mean_iu))
    return EvalResult(acc, mean_iu, iu, hist)


def _masked(x, masker):
    return masker(x) if masker is not None else x


def pretrain_dae(net, train_set, unlabeled_set, config, rng, writer=None):
    """
    Denoising reconstruction of each modality through its own encoder and
    reconstruction pathway. Prediction heads and discriminators are left as is.
    Returns the mean loss of every epoch.
    """
    epochs = config.OPTIM.PRETRAIN_EPOCHS
    if epochs <= 0:
        return []
    batch_size = config.OPTIM.BATCH_SIZE
    x1 = torch.cat([train_set.patches, unlabeled_set.patches], dim=0)
    x2 = train_set.spectra
    steps = int(math.ceil(x1.shape[0] * 1.0 / batch_size))

    head_ids = set(id(p) for m in net.head_modules() for p in m.parameters())
    head_ids.update(id(p) for p in net.discriminator_parameters())
    params = [p for p in net.parameters() if id(p) not in head_ids]
    optim = torch.optim.Adam(params, lr=config.OPTIM.BASE_LR,
                             betas=(config.OPTIM.BETA1, config.OPTIM.BETA2), eps=config.OPTIM.EPSILON)
    names = optimizer.param_names(net)

    set1, set2 = TensorDataset(x1), TensorDataset(x2)
    sampler1 = SeededSampler(set1, rng.seed, num_samples=steps * batch_size)
    sampler2 = SeededSampler(set2, rng.seed + 1, num_samples=steps * batch_size)
    loader1 = DataLoader(set1, batch_size=batch_size, sampler=sampler1, drop_last=True)
    loader2 = DataLoader(set2, batch_size=batch_size, sampler=sampler2, drop_last=True)

    losses = []
    for epoch in range(epochs):
        sampler1.set_epoch(epoch)
        sampler2.set_epoch(epoch)
        erng = rng.fork(epoch)
        masker = MaskingNoise(config.OPTIM.MASK_RATE, erng) if config.OPTIM.MASK_RATE > 0 else None
        net.train()
        set_rng(net, erng)
        meter = AverageMeter()
        for (b1,), (b2,) in zip(loader1, loader2):
            optim.zero_grad()
            rec = te.mse(b1, net.reconstruct(1, _masked(b1, masker))) + \
                te.mse(b2, net.reconstruct(2, _masked(b2, masker)))
            te.backward(rec)
            optimizer.adam_step(optim, names)
            meter.update(float(rec))
        losses.append(meter.avg)
        logging.info('[pretrain epoch {}], [reconstruction {:0.6f}]'.format(epoch, meter.avg))
        if writer is not None:
            writer.add_scalar('pretrain/reconstruction', meter.avg, epoch)
    return losses


def initial_state(scene, loaders, config):
    """
    Clamped one-hot rows for the labeled pixels and linear-classifier
    predictions on raw spectra for the unlabeled ones
    """
    C = scene.num_classes
    y_l = loaders.train_set.labels.numpy()
    Y_l = lp.one_hot(y_l, C)
    Y_u = lp.initial_pseudo_labels(raw_pixel_features(scene, loaders.train_set.ids), y_l,
                                   raw_pixel_features(scene, loaders.unlabeled_set.ids), C)
    return lp.build_state(Y_l, Y_u, config.LP.SIGMA)


def refresh_round(net, state, loaders, config, rng, round_index):
    """
    Tap features for all N samples, sigma selection on the first round, then
    one propagation refresh
    """
    patches = torch.cat([loaders.train_set.patches, loaders.unlabeled_set.patches], dim=0)
    feats = lp_features(net, patches).numpy()
    if round_index == 0 and config.LP.SELECT_SIGMA:
        sigma = lp.select_sigma(feats[:state.M], loaders.train_set.labels.numpy(), config.LP.SIGMA_GRID,
                                folds=config.LP.FOLDS, rng=rng.numpy(round_index),
                                max_iter=config.LP.MAX_ITER, tol=config.LP.TOL)
        logging.info('Selected sigma = {}'.format(sigma))
        state = state.replace(sigma=sigma)
    return lp.refresh_pseudo_labels(state, feats, max_iter=config.LP.MAX_ITER, tol=config.LP.TOL)


def train_epoch(net, loaders, Y_u, optimizers, schedulers, config, rng, names, curr_iter):
    """
    Runs the training loop per epoch. Returns (epoch means, iteration).
    """
    use_lp = config.MODEL.LP
    meters = collections.OrderedDict((k, AverageMeter()) for k in HISTORY_KEYS[2:-1])
    unlabeled = loaders.unlabeled if loaders.unlabeled is not None else [None] * loaders.steps

    for lab, unl in zip(loaders.train, unlabeled):
        batch = {'x_o': lab['x_o'], 'x_t': lab['x_t'], 'y': lab['y']}
        if unl is not None:
            batch['x_u'] = unl['x_o']
            batch['y_u'] = Y_u[unl['index']] if use_lp else None

        optimizers['gen'].zero_grad()
        out = forward_full(net, batch['x_o'], batch['x_t'], batch.get('x_u'), mode='train', rng=rng)
        parts = loss.compute_losses(net, out, batch, config.LOSS, use_lp=use_lp)
        te.backward(parts.total)
        optimizer.adam_step(optimizers['gen'], names)
        schedulers['gen'].step()

        l_d = loss.discriminator_loss(net, out)
        if net.sa_enabled:
            optimizers['disc'].zero_grad()
            te.backward(l_d)
            optimizer.adam_step(optimizers['disc'], names)
            schedulers['disc'].step()

        values = parts._replace(L_D=l_d).as_floats()
        for k, meter in meters.items():
            meter.update(values[k])
        curr_iter += 1

    return collections.OrderedDict((k, m.avg) for k, m in meters.items()), curr_iter


def _history_array(history):
    return np.array([[row[k] for k in HISTORY_KEYS] for row in history], dtype=np.float64)


def _history_rows(arr):
    return [collections.OrderedDict((k, (int(v) if k in ('round', 'epoch') else float(v)))
                                    for k, v in zip(HISTORY_KEYS, row)) for row in arr]


def _extra_entries(state, report, next_round, next_epoch, guard, seed):
    extra = collections.OrderedDict()
    extra['rng/seed'] = np.asarray(float(seed))
    extra['progress'] = np.array([next_round, next_epoch], dtype=np.float64)
    extra['guard'] = np.array([guard['initial'], guard['count']], dtype=np.float64)
    if state is not None:
        extra['lp/Y'] = state.Y
        extra['lp/Y_l'] = state.Y_l
        extra['lp/meta'] = np.array([state.M, state.sigma, state.round], dtype=np.float64)
    if report.history:
        extra['history'] = _history_array(report.history)
    if report.changed_counts:
        extra['changed'] = np.asarray(report.changed_counts, dtype=np.float64)
    if report.pretrain_losses:
        extra['pretrain'] = np.asarray(report.pretrain_losses, dtype=np.float64)
    return extra


def _restore_extras(entries, report):
    next_round, next_epoch = (int(v) for v in entries['progress'])
    initial, count = entries['guard']
    guard = {'initial': float(initial), 'count': int(count)}
    state = None
    if 'lp/Y' in entries:
        M, sigma, rnd = entries['lp/meta']
        state = lp.PseudoLabelState(entries['lp/Y'], int(M), float(sigma), round=int(rnd), Y_l=entries['lp/Y_l'])
    if 'history' in entries:
        report.history = _history_rows(entries['history'])
    if 'changed' in entries:
        report.changed_counts = [int(v) for v in entries['changed']]
    if 'pretrain' in entries:
        report.pretrain_losses = [float(v) for v in entries['pretrain']]
    return state, next_round, next_epoch, guard


def _check_divergence(guard, total, config):
    """
    Count consecutive epochs whose mean loss exceeds factor x the first epoch's
    """
    if math.isnan(guard['initial']):
        guard['initial'] = total
        return False
    if total > config.OPTIM.DIVERGENCE_FACTOR * guard['initial']:
        guard['count'] += 1
    else:
        guard['count'] = 0
    return guard['count'] >= config.OPTIM.DIVERGENCE_PATIENCE


def train(net, scene, config, rng, out_dir=None, writer=None, resume=None, max_epochs=None):
    """
    Full pipeline on one scene. `max_epochs` stops after that many epochs in
    total (the run can be continued with `resume`). Returns (net, TrainReport).
    """
    start_ts = time.time()
    seed = rng.seed
    set_seeds(seed)
    report = TrainReport(seed)
    if not net.initialized:
        init_params(net, rng.fork(0))

    unlabeled_ids = scene.ids('unlabeled')
    if config.MODEL.LP:
        unlabeled_ids = lp.cap_unlabeled(unlabeled_ids, int(scene.train_mask.sum()), config.LP.MAX_N,
                                         rng.numpy(7))
    loaders = datasets.setup_loaders(scene, config, seed, unlabeled_ids=unlabeled_ids)
    epochs, rounds = config.OPTIM.EPOCHS, config.OPTIM.ROUNDS
    max_iter = rounds * epochs * loaders.steps

    opt_gen, sched_gen = optimizer.get_optimizer(net.generator_parameters(), config.OPTIM, max_iter)
    opt_disc, sched_disc = optimizer.get_optimizer(net.discriminator_parameters(), config.OPTIM, max_iter)
    optimizers = {'gen': opt_gen, 'disc': opt_disc}
    schedulers = {'gen': sched_gen, 'disc': sched_disc}
    names = optimizer.param_names(net)
    guard = {'initial': float('nan'), 'count': 0}

    if resume is not None:
        entries = optimizer.load_checkpoint(resume)
        curr_iter = optimizer.restore_snapshot(entries, net, optimizers, schedulers, max_iter, config.OPTIM)
        state, start_round, start_epoch, guard = _restore_extras(entries, report)
    else:
        report.pretrain_losses = pretrain_dae(net, loaders.train_set, loaders.unlabeled_set, config,
                                              rng.fork(1), writer)
        state = initial_state(scene, loaders, config) if config.MODEL.LP else None
        curr_iter, start_round, start_epoch = 0, 0, 0

    if state is not None:
        report.sigma = state.sigma
    epochs_run = 0
    stop = False
    for rnd in range(start_round, rounds):
        Y_u = torch.as_tensor(state.Y_u, dtype=te.DTYPE) if state is not None else None
        for epoch in range(start_epoch if rnd == start_round else 0, epochs):
            global_epoch = rnd * epochs + epoch
            datasets.set_epoch(loaders, global_epoch)
            means, curr_iter = train_epoch(net, loaders, Y_u, optimizers, schedulers, config,
                                           _epoch_rng(rng, global_epoch), names, curr_iter)
            row = collections.OrderedDict([('round', rnd), ('epoch', epoch)])
            row.update(means)
            row['lr'] = opt_gen.param_groups[0]['lr']
            report.history.append(row)
            logging.info('[round {}], [epoch {}], [iter {} / {}], [loss {:0.6f}], [lr {:0.6f}]'.format(
                rnd, epoch, curr_iter, max_iter, row['total'], row['lr']))
            if writer is not None:
                for k in HISTORY_KEYS[2:]:
                    writer.add_scalar('train/{}'.format(k), row[k], global_epoch)

            next_round, next_epoch = (rnd, epoch + 1) if epoch + 1 < epochs else (rnd + 1, 0)
            if next_epoch == 0 and state is not None:
                state, changed = refresh_round(net, state, loaders, config, rng, rnd)
                if config.LP.DUMP and out_dir is not None:
                    lp.dump_state(state, os.path.join(out_dir, 'lp'))
                report.changed_counts.append(changed)
                report.sigma = state.sigma
                if changed == 0:
                    logging.info('Pseudo-labels stable after round {}'.format(rnd))
                    next_round = rounds
                    stop = True

            if _check_divergence(guard, row['total'], config):
                path = None
                if out_dir is not None:
                    path = os.path.join(out_dir, 'diverged.xmck')
                    optimizer.save_checkpoint(path, net, optimizers, curr_iter,
                                              _extra_entries(state, report, next_round, next_epoch, guard, seed))
                raise DivergenceError('loss {:.4g} above {}x the first epoch ({:.4g}) for {} epochs'.format(
                    row['total'], config.OPTIM.DIVERGENCE_FACTOR, guard['initial'], guard['count']), path)

            epochs_run += 1
            if max_epochs is not None and epochs_run >= max_epochs:
                stop = True
            if out_dir is not None and (epochs_run % config.RUN.CKPT_EVERY == 0 or stop):
                optimizer.save_checkpoint(os.path.join(out_dir, 'last.xmck'), net, optimizers, curr_iter,
                                          _extra_entries(state, report, next_round, next_epoch, guard, seed))
            if stop:
                break
        if stop:
            break

    report.iterations = curr_iter
    report.result = evaluate(net, scene, 'test', config.MODEL.PATCH)
    report.wall_time = time.time() - start_ts
    return net, report


def train_raw_baseline(scene, config):
    """
    Linear softmax classifier on center-pixel modality-1 spectra
    """
    train_ids, test_ids = scene.ids('train'), scene.ids('test')
    clf = SoftmaxClassifier(scene.lo_cube.shape[-1], scene.num_classes)
    clf.fit(raw_pixel_features(scene, train_ids), scene.labels_of(train_ids))
    pred = clf.predict(raw_pixel_features(scene, test_ids))
    hist = fast_hist(pred, scene.labels_of(test_ids), scene.num_classes)
    acc, mean_iu, iu = evaluate_hist(hist)
    logging.info('raw baseline: pixel acc {:.4f}, mIoU {:.4f}'.format(acc, mean_iu))
    return EvalResult(acc, mean_iu, iu, hist)


def train_dae_baseline(scene, config, rng):
    """
    Unimodal DAE: denoising pretraining on train + unlabeled patches, then
    supervised fine-tuning on the labeled pixels for the same epoch budget
    as the cross-modal run
    """
    from network import get_net

    set_seeds(rng.seed)
    net = get_net(config, arch='dae').init_params(rng.fork(0))
    loaders = datasets.setup_loaders(scene, config, rng.seed)
    batch_size = config.OPTIM.BATCH_SIZE
    names = optimizer.param_names(net)

    x = torch.cat([loaders.train_set.patches, loaders.unlabeled_set.patches], dim=0)
    pre_steps = int(math.ceil(x.shape[0] * 1.0 / batch_size))
    pre_set = TensorDataset(x)
    pre_sampler = SeededSampler(pre_set, rng.seed, num_samples=pre_steps * batch_size)
    pre_loader = DataLoader(pre_set, batch_size=batch_size, sampler=pre_sampler, drop_last=True)
    optim = torch.optim.Adam(net.parameters(), lr=config.OPTIM.BASE_LR,
                             betas=(config.OPTIM.BETA1, config.OPTIM.BETA2), eps=config.OPTIM.EPSILON)
    for epoch in range(config.OPTIM.PRETRAIN_EPOCHS):
        pre_sampler.set_epoch(epoch)
        erng = rng.fork(epoch + 1)
        masker = MaskingNoise(config.OPTIM.MASK_RATE, erng)
        net.train()
        set_rng(net, erng)
        for (b,) in pre_loader:
            optim.zero_grad()
            te.backward(te.mse(b, net.reconstruct(masker(b))))
            optimizer.adam_step(optim, names)

    total_epochs = config.OPTIM.EPOCHS * config.OPTIM.ROUNDS
    max_iter = total_epochs * loaders.steps
    optim, scheduler = optimizer.get_optimizer(net.parameters(), config.OPTIM, max_iter)
    for epoch in range(total_epochs):
        datasets.set_epoch(loaders, epoch)
        erng = rng.fork(1000 + epoch)
        net.train()
        set_rng(net, erng)
        for lab in loaders.train:
            optim.zero_grad()
            te.backward(te.cross_entropy(net(lab['x_o']), lab['y']))
            optimizer.adam_step(optim, names)
            scheduler.step()

    return evaluate_dataset(net, loaders.test_set, scene.num_classes, 'dae baseline test',
                            predict=net.predict)


def format_summary(report):
    """
    Deterministic key=value summary (no timings)
    """
    res = report.result
    lines = ['seed={}'.format(report.seed),
             'PixelAcc={!r}'.format(float(res.pixel_acc)),
             'mIoU={!r}'.format(float(res.mean_iu))]
    for c, v in enumerate(res.iu):
        lines.append('iou_{}={!r}'.format(c, float(v)))
    for c, row in enumerate(res.hist):
        lines.append('confusion_{}={}'.format(c, ','.join(str(int(v)) for v in row)))
    lines.append('changed_counts={}'.format(','.join(str(c) for c in report.changed_counts)))
    lines.append('sigma={!r}'.format(report.sigma))
    lines.append('epochs={}'.format(len(report.history)))
    last = report.last_losses()
    if last is not None:
        for k in HISTORY_KEYS[2:]:
            lines.append('final_{}={!r}'.format(k, float(last[k])))
    return '\n'.join(lines) + '\n'


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, 'metrics.csv'), HISTORY_KEYS,
              [[row[k] for k in HISTORY_KEYS] for row in report.history])
    with open(os.path.join(out_dir, 'summary.txt'), 'w') as f:
        f.write(format_summary(report))
    logging.info('Run finished in {:.1f}s'.format(report.wall_time))
