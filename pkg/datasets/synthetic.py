"""
Synthetic paired-modality scene

A reference cube of smooth class spectra over Voronoi regions is degraded two
ways: spectrally (band filters, full spatial detail) into the modality-1
cube, and spatially (Gaussian PSF, all bands) into the modality-2 cube.
"""
import collections
import hashlib
import logging
import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d, gaussian_filter, gaussian_filter1d
from scipy.spatial.distance import cdist

from datasets.container import read_container, write_container
from utils.errors import DegenerateError, DimensionError, FormatError, ParameterError


SPEC_FIELDS = ['height', 'width', 'num_classes', 'bands_hi', 'bands_lo', 'psf_sigma', 'noise_std',
               'label_fraction', 'unlabeled_fraction', 'min_per_class', 'min_angle', 'modality',
               'looks', 'seed']
ARRAYS = ['hi_cube', 'lo_cube', 'labels', 'train_mask', 'unlabeled_mask', 'test_mask', 'response']
PROTOTYPE_RETRIES = 100


class SyntheticSceneSpec(collections.namedtuple('SyntheticSceneSpec', SPEC_FIELDS)):

    @classmethod
    def from_cfg(cls, scene_cfg):
        return cls(**{f: scene_cfg[f.upper()] for f in SPEC_FIELDS})

    def validate(self):
        if not 0.0 < self.label_fraction < 1.0:
            raise ParameterError('label_fraction must lie in (0, 1), got {}'.format(self.label_fraction))
        if not 0.0 <= self.unlabeled_fraction < 1.0 - self.label_fraction:
            raise ParameterError('unlabeled_fraction must lie in [0, 1 - label_fraction)')
        if not 1 <= self.bands_lo < self.bands_hi:
            raise ParameterError('need 1 <= bands_lo < bands_hi, got {} / {}'.format(self.bands_lo, self.bands_hi))
        if self.num_classes < 2:
            raise ParameterError('need at least two classes')
        if self.psf_sigma < 0:
            raise ParameterError('psf_sigma must be >= 0')
        if self.modality not in ('msi', 'sar'):
            raise ParameterError('modality must be msi or sar, got {}'.format(self.modality))
        return self

    def format(self):
        return ''.join('{}={}\n'.format(f, repr(v) if isinstance(v, float) else v)
                       for f, v in zip(self._fields, self))

    @classmethod
    def parse(cls, text):
        values = dict(line.split('=', 1) for line in text.splitlines() if '=' in line)
        out = {}
        for f, default in zip(cls._fields, DEFAULT_SPEC):
            if f not in values:
                raise FormatError('scene description lacks {}'.format(f))
            out[f] = type(default)(values[f].strip())
        return cls(**out)


DEFAULT_SPEC = SyntheticSceneSpec(height=96, width=96, num_classes=6, bands_hi=64, bands_lo=8, psf_sigma=1.0,
                                  noise_std=0.02, label_fraction=0.05, unlabeled_fraction=0.3, min_per_class=5,
                                  min_angle=15.0, modality='msi', looks=4.0, seed=304)


class Scene(object):
    """
    hi_cube (h, w, d2) and lo_cube (h, w, d1) in [0, 1], labels (h, w),
    boolean split masks, the d1 x d2 response matrix and the generating spec
    """

    def __init__(self, hi_cube, lo_cube, labels, train_mask, unlabeled_mask, test_mask, response, spec):
        self.hi_cube = hi_cube
        self.lo_cube = lo_cube
        self.labels = labels.astype(np.int64)
        self.train_mask = train_mask.astype(bool)
        self.unlabeled_mask = unlabeled_mask.astype(bool)
        self.test_mask = test_mask.astype(bool)
        self.response = response
        self.spec = spec

    @property
    def shape(self):
        return self.labels.shape

    @property
    def num_classes(self):
        return self.spec.num_classes

    def ids(self, split):
        """
        Flat pixel ids (row * width + col) of a split, ascending
        """
        mask = {'train': self.train_mask, 'unlabeled': self.unlabeled_mask, 'test': self.test_mask}[split]
        return np.flatnonzero(mask.ravel())

    def labels_of(self, ids):
        return self.labels.ravel()[ids]


def response_matrix(bands_lo, bands_hi):
    """
    Row-stochastic Gaussian band filters evenly spread over the d2 bands
    """
    centers = (np.arange(bands_lo) + 0.5) * bands_hi / float(bands_lo)
    width = bands_hi / (2.0 * bands_lo)
    grid = np.arange(bands_hi) + 0.5
    R = np.exp(-0.5 * ((grid[None, :] - centers[:, None]) / width) ** 2)
    return R / R.sum(axis=1, keepdims=True)


def spectral_angle(a, b):
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def _random_prototype(rng, bands):
    grid = np.arange(bands, dtype=np.float64)
    spectrum = np.full(bands, 0.1)
    for _ in range(rng.integers(3, 6)):
        center = rng.uniform(0, bands)
        width = rng.uniform(0.05, 0.2) * bands
        spectrum += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((grid - center) / width) ** 2)
    return 0.9 * spectrum / spectrum.max()


def class_prototypes(num_classes, bands, min_angle, rng):
    prototypes = []
    for c in range(num_classes):
        for _ in range(PROTOTYPE_RETRIES):
            candidate = _random_prototype(rng, bands)
            if all(spectral_angle(candidate, p) >= min_angle for p in prototypes):
                prototypes.append(candidate)
                break
        else:
            raise ParameterError('could not draw prototype {} at least {} degrees from the others '
                                 'after {} tries'.format(c, min_angle, PROTOTYPE_RETRIES))
    return np.stack(prototypes)


def voronoi_labels(height, width, num_classes, rng, sites_per_class=2):
    """
    Nearest-site class map; every class owns at least one site pixel
    """
    n_sites = min(height * width, sites_per_class * num_classes)
    sites = rng.choice(height * width, size=n_sites, replace=False)
    site_class = np.concatenate([np.arange(num_classes), rng.integers(0, num_classes, n_sites - num_classes)])
    rows, cols = np.divmod(np.arange(height * width), width)
    pix = np.stack([rows, cols], axis=1).astype(np.float64)
    site_xy = np.stack(np.divmod(sites, width), axis=1).astype(np.float64)
    nearest = cdist(pix, site_xy, 'sqeuclidean').argmin(axis=1)
    return site_class[nearest].reshape(height, width)


def degrade_spectral(hi, response):
    """
    Per-pixel response @ spectrum
    """
    if hi.shape[-1] != response.shape[1]:
        raise DimensionError('degrade_spectral', hi.shape, response.shape)
    return np.tensordot(hi, response, axes=([hi.ndim - 1], [1]))


def gaussian_kernel(psf_sigma):
    radius = int(math.ceil(3.0 * psf_sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2.0 * psf_sigma * psf_sigma))
    return k / k.sum()


def degrade_spatial(cube, psf_sigma):
    """
    Separable normalized Gaussian blur per band, radius ceil(3 sigma),
    reflect padding (edge sample not repeated)
    """
    if psf_sigma < 0:
        raise ParameterError('psf_sigma must be >= 0, got {}'.format(psf_sigma))
    cube = np.asarray(cube, dtype=np.float64)
    if psf_sigma == 0:
        return cube.copy()
    k = gaussian_kernel(psf_sigma)
    out = correlate1d(cube, k, axis=0, mode='mirror')
    return correlate1d(out, k, axis=1, mode='mirror')


def degrade_heterogeneous(lo_cube, looks, rng):
    """
    SAR-like cube: squared magnitude times unit-mean gamma speckle, rescaled to [0, 1]
    """
    power = np.asarray(lo_cube, dtype=np.float64) ** 2
    speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=power.shape)
    out = power * speckle
    peak = out.max()
    return out / peak if peak > 0 else out


def inject_noise(cube, snr_db, rng, clamp=True):
    """
    Add zero-mean white Gaussian noise with variance mean(cube^2) / 10^(snr/10)
    """
    cube = np.asarray(cube, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return cube.copy()
    if math.isnan(snr_db):
        raise ParameterError('snr_db must not be NaN')
    power = float(np.mean(cube ** 2))
    std = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    out = cube + rng.normal(0.0, std, size=cube.shape)
    return np.clip(out, 0.0, 1.0) if clamp else out


def split_scene(labels, label_fraction, unlabeled_fraction, min_per_class, rng):
    """
    Stratified train / unlabeled / test masks covering every pixel.
    Each class keeps at least `min_per_class` train pixels (when it has room)
    and at least one test pixel.
    """
    flat = labels.ravel()
    train = np.zeros(flat.shape, dtype=bool)
    unlabeled = np.zeros(flat.shape, dtype=bool)
    for c in np.unique(flat):
        members = rng.permutation(np.flatnonzero(flat == c))
        n = members.shape[0]
        if n < 2:
            raise DegenerateError('class {} has {} pixel(s), cannot appear in both train and test'.format(c, n))
        n_train = min(n - 1, max(min_per_class, int(round(label_fraction * n))))
        n_unl = min(n - 1 - n_train, int(round(unlabeled_fraction * n)))
        train[members[:n_train]] = True
        unlabeled[members[n_train:n_train + n_unl]] = True
    test = ~(train | unlabeled)
    shape = labels.shape
    return train.reshape(shape), unlabeled.reshape(shape), test.reshape(shape)


def generate_scene(spec):
    """
    Pure function of `spec` (seed included)
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    prototypes = class_prototypes(spec.num_classes, spec.bands_hi, spec.min_angle, rng)
    labels = voronoi_labels(h, w, spec.num_classes, rng)

    # spatially smooth brightness, spectrally correlated noise
    brightness = 1.0 + 0.3 * gaussian_filter(rng.standard_normal((h, w)), sigma=3.0, mode='mirror')
    noise = gaussian_filter1d(rng.standard_normal((h, w, spec.bands_hi)), sigma=2.0, axis=2, mode='mirror')
    noise *= spec.noise_std / max(noise.std(), 1e-12)
    reference = np.clip(prototypes[labels] * brightness[:, :, None] + noise, 0.0, 1.0)

    response = response_matrix(spec.bands_lo, spec.bands_hi)
    lo_cube = degrade_spectral(reference, response)
    if spec.modality == 'sar':
        lo_cube = degrade_heterogeneous(lo_cube, spec.looks, rng)
    hi_cube = degrade_spatial(reference, spec.psf_sigma)

    train, unlabeled, test = split_scene(labels, spec.label_fraction, spec.unlabeled_fraction,
                                         spec.min_per_class, rng)
    logging.info('Generated {}x{} scene: {} classes, {} train / {} unlabeled / {} test pixels'.format(
        h, w, spec.num_classes, int(train.sum()), int(unlabeled.sum()), int(test.sum())))
    return Scene(hi_cube, lo_cube, labels, train, unlabeled, test, response, spec)


def raw_pixel_features(scene, ids):
    """
    Center-pixel modality-1 spectra, (n, d1)
    """
    return scene.lo_cube.reshape(-1, scene.lo_cube.shape[-1])[ids]


PatchBatch = collections.namedtuple('PatchBatch', ['patches', 'spectra', 'labels', 'ids'])


def extract_patches(scene, ids, p, lo_cube=None):
    """
    Reflect-padded p x p modality-1 windows centered on each pixel, as
    (n, d1, p, p), with the aligned modality-2 spectra (n, d2)
    """
    if p < 1 or p % 2 == 0:
        raise ParameterError('patch extent must be odd, got {}'.format(p))
    cube = scene.lo_cube if lo_cube is None else lo_cube
    r = p // 2
    padded = np.pad(cube, ((r, r), (r, r), (0, 0)), mode='reflect') if r else cube
    windows = sliding_window_view(padded, (p, p), axis=(0, 1))
    rows, cols = np.divmod(np.asarray(ids, dtype=np.int64), scene.shape[1])
    patches = np.ascontiguousarray(windows[rows, cols])
    spectra = scene.hi_cube.reshape(-1, scene.hi_cube.shape[-1])[ids]
    labels = scene.labels_of(ids)
    return PatchBatch(patches, spectra, labels, np.asarray(ids, dtype=np.int64))


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def save_scene(scene, out_dir):
    """
    One container per array, manifest.txt (name sha256 shape) and scene.txt
    """
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    lines = []
    for name in ARRAYS:
        arr = np.asarray(getattr(scene, name), dtype=np.float64)
        path = os.path.join(out_dir, '{}.xmdt'.format(name))
        write_container(path, arr)
        lines.append('{} {} {}'.format(os.path.basename(path), _sha256(path), 'x'.join(str(d) for d in arr.shape)))
    with open(os.path.join(out_dir, 'manifest.txt'), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    with open(os.path.join(out_dir, 'scene.txt'), 'w') as f:
        f.write(scene.spec.format())
    logging.info('Scene written to {}'.format(out_dir))


def load_scene(scene_dir):
    manifest = os.path.join(scene_dir, 'manifest.txt')
    if not os.path.exists(manifest):
        raise FormatError('no manifest.txt in {}'.format(scene_dir))
    expected = {}
    with open(manifest) as f:
        for line in f:
            if line.strip():
                name, digest, _ = line.split()
                expected[name] = digest
    arrays = {}
    for name in ARRAYS:
        fname = '{}.xmdt'.format(name)
        path = os.path.join(scene_dir, fname)
        if fname not in expected:
            raise FormatError('manifest lacks {}'.format(fname))
        if _sha256(path) != expected[fname]:
            raise FormatError('{} does not match its manifest hash'.format(fname))
        arrays[name] = read_container(path)
    with open(os.path.join(scene_dir, 'scene.txt')) as f:
        spec = SyntheticSceneSpec.parse(f.read())
    return Scene(spec=spec, **arrays)
