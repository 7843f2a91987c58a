"""
Standard Transform

Corruptions applied to modality cubes and training batches.
"""
import math

import numpy as np
import torch

from datasets.synthetic import inject_noise
from utils.errors import ParameterError


class MaskingNoise(object):
    """
    Denoising-autoencoder corruption: zero each entry with probability `rate`.
    Survivors are not rescaled.
    """

    def __init__(self, rate=0.1, rng=None):
        if not 0.0 <= rate < 1.0:
            raise ParameterError('masking rate must lie in [0, 1), got {}'.format(rate))
        self.rate = rate
        self.rng = rng

    def __call__(self, x):
        if self.rate == 0.0:
            return x
        keep = torch.full_like(x, 1.0 - self.rate)
        mask = torch.bernoulli(keep, generator=self.rng.generator if self.rng is not None else None)
        return x * mask


class AddGaussianNoise(object):
    """
    White Gaussian noise at a fixed SNR (dB) on a numpy cube; +inf is the identity
    """

    def __init__(self, snr_db, rng):
        self.snr_db = float(snr_db)
        self.rng = rng

    def __call__(self, cube):
        return inject_noise(cube, self.snr_db, self.rng)

    def __repr__(self):
        return 'AddGaussianNoise(snr_db={})'.format('inf' if math.isinf(self.snr_db) else self.snr_db)


def measured_snr(clean, noisy):
    """
    10 log10(signal power / noise power) in dB
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return 10.0 * math.log10(float(np.mean(clean ** 2)) / float(np.mean(noise ** 2)))
