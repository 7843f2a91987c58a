"""
Config

Global defaults live in the `cfg` AttrDict tree below. A run starts from
`get_cfg_defaults()`, merges a plain-text key=value file, then command line
overrides, and finally freezes the result with `assert_and_infer_cfg`.

    optim.base_lr=0.0005
    lp.sigma_grid=0.001,0.01,0.1,1,10,100
    model.sa=off
"""
import logging
import os

import torch

from utils.attr_dict import AttrDict
from utils.errors import ConfigError


__C = AttrDict()
cfg = __C

# Synthetic paired-modality scene
__C.SCENE = AttrDict()
__C.SCENE.HEIGHT = 96
__C.SCENE.WIDTH = 96
__C.SCENE.NUM_CLASSES = 6
# modality-2 (hyperspectral-like) band count d2
__C.SCENE.BANDS_HI = 64
# modality-1 (multispectral-like) band count d1
__C.SCENE.BANDS_LO = 8
__C.SCENE.PSF_SIGMA = 1.0
__C.SCENE.NOISE_STD = 0.02
__C.SCENE.LABEL_FRACTION = 0.05
__C.SCENE.UNLABELED_FRACTION = 0.3
__C.SCENE.MIN_PER_CLASS = 5
__C.SCENE.MIN_ANGLE = 15.0
# msi: linear spectral filter; sar: squared magnitude + speckle on top of it
__C.SCENE.MODALITY = 'msi'
__C.SCENE.LOOKS = 4.0
__C.SCENE.SEED = 304

__C.MODEL = AttrDict()
__C.MODEL.PATCH = 7
__C.MODEL.IL = True
__C.MODEL.LP = True
__C.MODEL.SA = True
__C.MODEL.BN = True
__C.MODEL.DROPOUT = True
__C.MODEL.DROPOUT_RATE = 0.5
__C.MODEL.BN_EPS = 1e-5
__C.MODEL.BN_MOMENTUM = 0.99
__C.MODEL.LEAKY_SLOPE = 0.2

# Weights of the four objective terms
__C.LOSS = AttrDict()
__C.LOSS.W_L = 1.0
__C.LOSS.W_PL = 1.0
__C.LOSS.W_REC = 1.0
__C.LOSS.W_ADV = 1.0

__C.OPTIM = AttrDict()
__C.OPTIM.BASE_LR = 0.0005
__C.OPTIM.POWER = 0.98
__C.OPTIM.BETA1 = 0.9
__C.OPTIM.BETA2 = 0.999
__C.OPTIM.EPSILON = 1e-8
__C.OPTIM.BATCH_SIZE = 64
# epochs per round
__C.OPTIM.EPOCHS = 30
__C.OPTIM.ROUNDS = 4
__C.OPTIM.PRETRAIN_EPOCHS = 10
__C.OPTIM.MASK_RATE = 0.1
__C.OPTIM.DIVERGENCE_FACTOR = 10.0
__C.OPTIM.DIVERGENCE_PATIENCE = 3

__C.LP = AttrDict()
__C.LP.SIGMA = 1.0
__C.LP.SIGMA_GRID = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0]
__C.LP.SELECT_SIGMA = True
__C.LP.FOLDS = 5
__C.LP.MAX_ITER = 10000
__C.LP.TOL = 1e-8
__C.LP.MAX_N = 20000
# write S, P and Y of every refresh under <out>/lp
__C.LP.DUMP = False

__C.RUN = AttrDict()
__C.RUN.SEED = 304
__C.RUN.OUT_DIR = 'logs/run'
__C.RUN.SCENE_DIR = ''
__C.RUN.CKPT_EVERY = 1
__C.RUN.NUM_WORKERS = 0
__C.RUN.SEEDS = [0, 1, 2, 3, 4]
__C.RUN.SNR_GRID = [10.0, 20.0, 30.0, 40.0]
__C.RUN.TENSORBOARD = True

_TRUE = ('1', 'true', 'on', 'yes')
_FALSE = ('0', 'false', 'off', 'no')


def get_cfg_defaults():
    """
    Fresh mutable copy of the defaults
    """
    return cfg.clone()


def _canonical_key(key):
    parts = key.strip().split('.')
    return '.'.join(p.upper() for p in parts)


def _coerce(key, default, raw):
    """
    Convert the text value `raw` to the type of `default`
    """
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    try:
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            items = text if isinstance(text, list) else [t for t in str(text).split(',') if t.strip()]
            elem = type(default[0]) if default else str
            return [elem(t.strip()) if isinstance(t, str) else elem(t) for t in items]
        return str(text)
    except ValueError:
        raise ConfigError(key, 'cannot parse "{}" as {}'.format(raw, type(default).__name__))


def merge_overrides(config, overrides):
    """
    Apply a {dotted_key: value} mapping; unknown keys are rejected
    """
    for key, value in overrides.items():
        ckey = _canonical_key(key)
        try:
            default = config.get_dotted(ckey)
        except KeyError:
            raise ConfigError(key, 'unknown key')
        if isinstance(default, AttrDict):
            raise ConfigError(key, 'is a section, not a value')
        config.set_dotted(ckey, _coerce(key, default, value))
    return config


def parse_kv(text, source='<string>'):
    """
    Parse key=value lines; '#' starts a comment
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(line, 'line {} of {} is not key=value'.format(lineno, source))
        key, value = line.split('=', 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None):
    """
    Defaults, then the key=value file at `path`, then `overrides`
    """
    config = get_cfg_defaults()
    if path:
        with open(path, 'r') as f:
            merge_overrides(config, parse_kv(f.read(), source=path))
    if overrides:
        merge_overrides(config, overrides)
    return config


def format_config(config):
    lines = []
    for key, value in sorted(config.flatten()):
        if isinstance(value, list):
            value = ','.join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            value = 'on' if value else 'off'
        elif isinstance(value, float):
            value = repr(value)
        lines.append('{}={}'.format(key.lower(), value))
    return '\n'.join(lines) + '\n'


def dump_config(config, path):
    with open(path, 'w') as f:
        f.write(format_config(config))


def _require(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def assert_and_infer_cfg(config, make_immutable=True):
    """
    Validate ranges of a merged config, apply the thread cap and freeze it.
    Call this after all merging is done.
    """
    s, m, o, lp = config.SCENE, config.MODEL, config.OPTIM, config.LP
    _require(0.0 < s.LABEL_FRACTION < 1.0, 'scene.label_fraction', 'must lie in (0, 1)')
    _require(0.0 <= s.UNLABELED_FRACTION < 1.0, 'scene.unlabeled_fraction', 'must lie in [0, 1)')
    _require(s.LABEL_FRACTION + s.UNLABELED_FRACTION < 1.0, 'scene.unlabeled_fraction',
             'label and unlabeled fractions leave no test pixels')
    _require(s.HEIGHT >= 2 and s.WIDTH >= 2, 'scene.height', 'scene must be at least 2x2')
    _require(s.NUM_CLASSES >= 2, 'scene.num_classes', 'need at least two classes')
    _require(1 <= s.BANDS_LO < s.BANDS_HI, 'scene.bands_lo', 'must satisfy 1 <= bands_lo < bands_hi')
    _require(s.PSF_SIGMA >= 0, 'scene.psf_sigma', 'must be >= 0')
    _require(s.MODALITY in ('msi', 'sar'), 'scene.modality', 'must be msi or sar')
    _require(m.PATCH >= 1 and m.PATCH % 2 == 1, 'model.patch', 'must be odd')
    _require(0.0 <= m.DROPOUT_RATE < 1.0, 'model.dropout_rate', 'must lie in [0, 1)')
    _require(0.0 <= m.LEAKY_SLOPE < 1.0, 'model.leaky_slope', 'must lie in [0, 1)')
    _require(o.BASE_LR > 0, 'optim.base_lr', 'must be > 0')
    _require(o.POWER > 0, 'optim.power', 'must be > 0')
    _require(o.BATCH_SIZE >= 2, 'optim.batch_size', 'batch norm needs at least 2 samples')
    _require(o.EPOCHS >= 0, 'optim.epochs', 'must be >= 0')
    _require(o.ROUNDS >= 1, 'optim.rounds', 'must be >= 1')
    _require(lp.SIGMA > 0, 'lp.sigma', 'must be > 0')
    _require(len(lp.SIGMA_GRID) > 0 and all(v > 0 for v in lp.SIGMA_GRID),
             'lp.sigma_grid', 'must be a non-empty list of positive values')
    _require(lp.FOLDS >= 2, 'lp.folds', 'must be >= 2')
    _require(lp.TOL > 0, 'lp.tol', 'must be > 0')

    threads = os.environ.get('XMODAL_THREADS')
    if threads:
        torch.set_num_threads(max(1, int(threads)))
        logging.info('Capping torch threads at %s', threads)

    if make_immutable:
        config.immutable(True)
    return config
