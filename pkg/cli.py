"""
Command line entry point

    python cli.py generate --out scenes/default
    python cli.py train --scene scenes/default --out logs/full --seed 0
    python cli.py ablate --scene scenes/default --out logs/ablation --seeds 0,1,2,3,4
    python cli.py noise-sweep --ckpt-sa logs/full/final.xmck --ckpt-nosa logs/nosa/final.xmck
    python cli.py lp-demo --scene scenes/default --raw --out logs/lp

Exit codes: 0 success, 1 config error, 2 runtime/numeric error, 3 divergence.
"""
from __future__ import absolute_import
from __future__ import division
import argparse
import collections
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch
from tqdm import tqdm

import datasets
import label_propagation as lp
import network
import optimizer
import train
from config import assert_and_infer_cfg, dump_config, format_config, load_config, merge_overrides, parse_kv
from datasets.container import write_container
from datasets.synthetic import SPEC_FIELDS, SyntheticSceneSpec, generate_scene, load_scene, save_scene
from network.tensor_engine import RngState
from network.xmodalnet import init_params, lp_features
from transforms.transforms import AddGaussianNoise
from utils.errors import ConfigError, DivergenceError, XModalError
from utils.misc import prep_experiment, save_log, write_csv


TOGGLES = ('il', 'lp', 'sa', 'bn', 'dropout')

# rows of the module ablation: name -> toggles
ABLATION_ROWS = collections.OrderedDict([
    ('none', dict(il=False, lp=False, sa=False, bn=True, dropout=True)),
    ('+IL', dict(il=True, lp=False, sa=False, bn=True, dropout=True)),
    ('+IL+LP', dict(il=True, lp=True, sa=False, bn=True, dropout=True)),
    ('+IL+LP+SA', dict(il=True, lp=True, sa=True, bn=True, dropout=True)),
    ('no-BN-no-dropout', dict(il=True, lp=True, sa=True, bn=False, dropout=False)),
    ('no-BN', dict(il=True, lp=True, sa=True, bn=False, dropout=True)),
    ('no-dropout', dict(il=True, lp=True, sa=True, bn=True, dropout=False)),
])

LOSS_COLUMNS = ['L_l', 'L_pl', 'L_rec', 'L_adv', 'L_D', 'total']


def _float_list(text):
    return [float(v) for v in text.split(',') if v.strip()]


def _int_list(text):
    return [int(v) for v in text.split(',') if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(description='Cross-modal semi-supervised pixel classification')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help='key=value config file merged over the defaults')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override any config key, e.g. --set optim.base_lr=0.001')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--out', type=str, default=None, help='output directory')
    common.add_argument('--scene', type=str, default=None,
                        help='scene directory written by generate; generated from the config if absent')
    common.add_argument('--toggle', action='append', default=[], metavar='MODULE=on|off',
                        help='module toggle, MODULE in il, lp, sa, bn, dropout')
    common.add_argument('--epochs', type=int, default=None, help='epochs per round')
    common.add_argument('--rounds', type=int, default=None)

    p = sub.add_parser('generate', parents=[common], help='write a synthetic scene')
    p.add_argument('--force', action='store_true', default=False,
                   help='write into a non-empty output directory')

    p = sub.add_parser('train', parents=[common], help='full training pipeline')
    p.add_argument('--ckpt', type=str, default=None, help='resume from this checkpoint')

    p = sub.add_parser('ablate', parents=[common], help='module ablation grid')
    p.add_argument('--seeds', type=_int_list, default=None)
    p.add_argument('--parallel', type=int, default=0, help='number of worker processes (0: sequential)')

    p = sub.add_parser('noise-sweep', parents=[common], help='accuracy vs SNR of two trained models')
    p.add_argument('--ckpt-sa', type=str, required=True)
    p.add_argument('--ckpt-nosa', type=str, required=True)
    p.add_argument('--snr-grid', type=_float_list, default=None)
    p.add_argument('--seeds', type=_int_list, default=None)

    p = sub.add_parser('lp-demo', parents=[common], help='standalone label propagation with audit dumps')
    p.add_argument('--raw', action='store_true', default=False, help='propagate on raw spectra')
    p.add_argument('--ckpt', type=str, default=None, help='network whose tap features are used')
    p.add_argument('--subsample', type=int, default=None,
                   help='cap labeled + unlabeled samples at this count')
    return parser


def _overrides(args):
    out = collections.OrderedDict()
    for item in args.overrides:
        out.update(parse_kv(item, source='--set'))
    for item in args.toggle:
        if '=' not in item:
            raise ConfigError('--toggle', 'expected MODULE=on|off, got "{}"'.format(item))
        name, value = item.split('=', 1)
        if name.strip().lower() not in TOGGLES:
            raise ConfigError('--toggle', 'unknown module "{}"'.format(name))
        out['model.{}'.format(name.strip().lower())] = value
    if args.seed is not None:
        out['scene.seed' if args.command == 'generate' else 'run.seed'] = args.seed
    if args.out is not None:
        out['run.out_dir'] = args.out
    if args.scene is not None:
        out['run.scene_dir'] = args.scene
    if args.epochs is not None:
        out['optim.epochs'] = args.epochs
    if args.rounds is not None:
        out['optim.rounds'] = args.rounds
    if getattr(args, 'snr_grid', None):
        out['run.snr_grid'] = args.snr_grid
    if getattr(args, 'seeds', None):
        out['run.seeds'] = args.seeds
    return out


def _scene_overrides(spec):
    return dict(('scene.{}'.format(f), v) for f, v in zip(SPEC_FIELDS, spec))


def prepare(config_path=None, overrides=None):
    """
    Resolve the config and the scene it names. A scene loaded from disk
    overwrites the SCENE section so the network matches its band counts.
    Returns (frozen config, scene).
    """
    config = load_config(config_path, overrides)
    scene = None
    if config.RUN.SCENE_DIR:
        scene = load_scene(config.RUN.SCENE_DIR)
        merge_overrides(config, _scene_overrides(scene.spec))
    assert_and_infer_cfg(config)
    if scene is None:
        scene = generate_scene(SyntheticSceneSpec.from_cfg(config.SCENE).validate())
    return config, scene


def _out_dir(config):
    out = config.RUN.OUT_DIR
    os.makedirs(out, exist_ok=True)
    return out


def cmd_generate(args):
    config = assert_and_infer_cfg(load_config(args.config, _overrides(args)))
    spec = SyntheticSceneSpec.from_cfg(config.SCENE).validate()
    out = config.RUN.OUT_DIR
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError('--out', 'directory {} is not empty; pass --force to overwrite'.format(out))
    os.makedirs(out, exist_ok=True)
    save_log('generate', out, 'scene')
    save_scene(generate_scene(spec), out)
    dump_config(config, os.path.join(out, 'config.txt'))
    return 0


def cmd_train(args):
    config, scene = prepare(args.config, _overrides(args))
    out = _out_dir(config)
    writer = prep_experiment(out, tensorboard=config.RUN.TENSORBOARD)
    dump_config(config, os.path.join(out, 'config.txt'))
    logging.info('Resolved config:\n{}'.format(format_config(config)))

    net = network.get_net(config)
    try:
        net, report = train.train(net, scene, config, RngState(config.RUN.SEED), out_dir=out, writer=writer,
                                  resume=args.ckpt)
    finally:
        if writer is not None:
            writer.close()
    optimizer.save_checkpoint(os.path.join(out, 'final.xmck'), net, {}, report.iterations)
    train.write_report(report, out)
    return 0


def run_cell(config_text, scene, row, seed, out_dir):
    """
    One (ablation row, seed) training run; returns the CSV row
    """
    overrides = dict(('model.{}'.format(k), v) for k, v in ABLATION_ROWS[row].items())
    overrides['run.seed'] = seed
    overrides['run.out_dir'] = out_dir
    config = load_config(overrides=parse_kv(config_text))
    merge_overrides(config, overrides)
    assert_and_infer_cfg(config)
    os.makedirs(out_dir, exist_ok=True)
    dump_config(config, os.path.join(out_dir, 'config.txt'))

    net = network.get_net(config)
    _, report = train.train(net, scene, config, RngState(seed), out_dir=out_dir)
    train.write_report(report, out_dir)
    last = report.last_losses()
    losses = [last[k] if last is not None else '' for k in LOSS_COLUMNS]
    return [row, seed, report.result.pixel_acc, report.result.mean_iu] + losses


def cmd_ablate(args):
    config, scene = prepare(args.config, _overrides(args))
    out = _out_dir(config)
    save_log('ablate', out, 'grid')
    dump_config(config, os.path.join(out, 'config.txt'))
    config_text = format_config(config)
    cells = [(row, seed) for row in ABLATION_ROWS for seed in config.RUN.SEEDS]

    def cell_dir(row, seed):
        return os.path.join(out, row.replace('+', 'p'), 'seed{}'.format(seed))

    rows = []
    if args.parallel > 0:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(run_cell, config_text, scene, row, seed, cell_dir(row, seed))
                       for row, seed in cells]
            for f in tqdm(futures, desc='ablation'):
                rows.append(f.result())
    else:
        for row, seed in tqdm(cells, desc='ablation'):
            rows.append(run_cell(config_text, scene, row, seed, cell_dir(row, seed)))

    write_csv(os.path.join(out, 'ablation.csv'), ['config', 'seed', 'PixelAcc', 'mIoU'] + LOSS_COLUMNS, rows)
    summary = []
    for row in ABLATION_ROWS:
        accs = [r[2] for r in rows if r[0] == row]
        mious = [r[3] for r in rows if r[0] == row]
        summary.append([row, float(np.median(accs)), float(np.median(mious)), len(accs)])
        logging.info('{:<18s} median PixelAcc {:.4f}'.format(row, summary[-1][1]))
    write_csv(os.path.join(out, 'ablation_summary.csv'), ['config', 'median_PixelAcc', 'median_mIoU', 'seeds'],
              summary)
    return 0


def _load_model(path, flag, scene_dir=None):
    """
    Network, config and scene of a finished run; its config.txt sits next to
    the checkpoint
    """
    if not path or not os.path.exists(path):
        raise ConfigError(flag, 'no checkpoint at {}'.format(path))
    cfg_path = os.path.join(os.path.dirname(os.path.abspath(path)), 'config.txt')
    if not os.path.exists(cfg_path):
        raise ConfigError(flag, 'no config.txt next to {}'.format(path))
    overrides = {'run.scene_dir': scene_dir} if scene_dir else None
    config, scene = prepare(cfg_path, overrides)
    net = network.get_net(config)
    optimizer.load_weights(optimizer.load_checkpoint(path), net)
    return net, config, scene


def cmd_noise_sweep(args):
    base = assert_and_infer_cfg(load_config(args.config, _overrides(args)))
    out = _out_dir(base)
    save_log('noise_sweep', out, 'sweep')
    grid = [float('inf')] + list(base.RUN.SNR_GRID)
    models = collections.OrderedDict([
        ('sa', _load_model(args.ckpt_sa, '--ckpt-sa', args.scene)),
        ('nosa', _load_model(args.ckpt_nosa, '--ckpt-nosa', args.scene)),
    ])

    rows = []
    jobs = [(name, seed) for name in models for seed in base.RUN.SEEDS]
    for name, seed in tqdm(jobs, desc='noise sweep'):
        net, config, scene = models[name]
        rng = RngState(seed)
        clean = None
        for i, snr in enumerate(grid):
            lo_cube = AddGaussianNoise(snr, rng.numpy(i))(scene.lo_cube)
            res = train.evaluate(net, scene, 'test', config.MODEL.PATCH, lo_cube=lo_cube,
                                 dataset_name='{} snr={}'.format(name, snr))
            if clean is None:
                clean = res.pixel_acc
            rows.append([name, seed, 'inf' if math.isinf(snr) else snr, res.pixel_acc, res.mean_iu,
                         clean - res.pixel_acc])
    write_csv(os.path.join(out, 'noise_sweep.csv'), ['model', 'seed', 'snr_db', 'PixelAcc', 'mIoU', 'drop'], rows)
    return 0


def cmd_lp_demo(args):
    config, scene = prepare(args.config, _overrides(args))
    out = _out_dir(config)
    save_log('lp_demo', out, 'demo')
    rng = RngState(config.RUN.SEED)

    ids_l, ids_u = scene.ids('train'), scene.ids('unlabeled')
    if args.subsample:
        ids_u = lp.cap_unlabeled(ids_u, ids_l.shape[0], args.subsample, rng.numpy(7))
    lp.check_dense_cap(ids_l.shape[0] + ids_u.shape[0], config.LP.MAX_N)
    ids = np.concatenate([ids_l, ids_u])

    raw = datasets.raw_pixel_features(scene, ids)
    if args.raw:
        feats = raw
    else:
        net = network.get_net(config)
        if args.ckpt:
            optimizer.load_weights(optimizer.load_checkpoint(args.ckpt), net)
        else:
            init_params(net, rng.fork(0))
        batch = datasets.extract_patches(scene, ids, config.MODEL.PATCH)
        feats = lp_features(net, torch.as_tensor(batch.patches)).numpy()

    M, C = ids_l.shape[0], scene.num_classes
    y_l = scene.labels_of(ids_l)
    Y0 = np.concatenate([lp.one_hot(y_l, C),
                         lp.initial_pseudo_labels(raw[:M], y_l, raw[M:], C)], axis=0)
    S = lp.similarity_matrix(feats, config.LP.SIGMA)
    P = lp.transfer_matrix(S)
    history = []
    result = lp.propagate(P, Y0, M, max_iter=config.LP.MAX_ITER, tol=config.LP.TOL, history=history)
    exact = lp.closed_form(P, Y0, M)

    write_container(os.path.join(out, 'S.xmdt'), S)
    write_container(os.path.join(out, 'P.xmdt'), P)
    write_container(os.path.join(out, 'Y_iterations.xmdt'), np.stack(history))
    write_container(os.path.join(out, 'Y_closed_form.xmdt'), exact)
    lines = ['samples={}'.format(ids.shape[0]),
             'labeled={}'.format(M),
             'sigma={!r}'.format(config.LP.SIGMA),
             'features={}'.format('raw' if args.raw else 'tap'),
             'iterations={}'.format(result.iterations),
             'last_delta={!r}'.format(result.delta),
             'max_row_sum_error={!r}'.format(float(np.abs(P.sum(axis=1) - 1.0).max())),
             'max_abs_vs_closed_form={!r}'.format(float(np.abs(result.Y - exact).max()))]
    with open(os.path.join(out, 'lp_demo.txt'), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    logging.info('LP demo: {}'.format(', '.join(lines)))
    return 0


COMMANDS = {
    'generate': cmd_generate,
    'train': cmd_train,
    'ablate': cmd_ablate,
    'noise-sweep': cmd_noise_sweep,
    'lp-demo': cmd_lp_demo,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        logging.error('Training diverged: {} (checkpoint: {})'.format(e, e.checkpoint))
        return 3
    except ConfigError as e:
        logging.error('Config error: {}'.format(e))
        return 1
    except XModalError as e:
        logging.error('{}: {}'.format(type(e).__name__, e))
        return 2


if __name__ == '__main__':
    sys.exit(main())
