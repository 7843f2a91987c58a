"""
Dataset setup and loaders
"""
import collections
import logging
import math

import torch
from torch.utils.data import DataLoader, Dataset

from datasets.sampler import SeededSampler
from datasets.synthetic import (extract_patches, generate_scene, load_scene,
                                raw_pixel_features, save_scene)
from network import tensor_engine as te


Loaders = collections.namedtuple('Loaders', ['train', 'unlabeled', 'steps', 'train_set', 'unlabeled_set',
                                             'test_set'])


class PatchDataset(Dataset):
    """
    Pre-extracted pixels of one split. Items are dicts holding the row index,
    the modality-1 patch and, when present, the modality-2 spectrum and the
    one-hot label.
    """

    def __init__(self, batch, num_classes, with_spectra=True, with_labels=True):
        self.ids = batch.ids
        self.patches = torch.as_tensor(batch.patches, dtype=te.DTYPE)
        self.spectra = torch.as_tensor(batch.spectra, dtype=te.DTYPE) if with_spectra else None
        self.labels = torch.as_tensor(batch.labels, dtype=torch.long)
        self.onehot = None
        if with_labels:
            self.onehot = torch.zeros(len(self.ids), num_classes, dtype=te.DTYPE)
            self.onehot[torch.arange(len(self.ids)), self.labels] = 1.0

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        item = {'index': index, 'x_o': self.patches[index]}
        if self.spectra is not None:
            item['x_t'] = self.spectra[index]
        if self.onehot is not None:
            item['y'] = self.onehot[index]
        return item


def make_dataset(scene, ids, patch, with_spectra=True, with_labels=True, lo_cube=None):
    batch = extract_patches(scene, ids, patch, lo_cube=lo_cube)
    return PatchDataset(batch, scene.num_classes, with_spectra=with_spectra, with_labels=with_labels)


def setup_loaders(scene, config, seed, unlabeled_ids=None):
    """
    Labeled and unlabeled loaders over one common number of steps per epoch,
    ceil(max(M, U) / batch); the smaller pool is cycled.
    """
    batch_size = config.OPTIM.BATCH_SIZE
    patch = config.MODEL.PATCH
    train_set = make_dataset(scene, scene.ids('train'), patch)
    if unlabeled_ids is None:
        unlabeled_ids = scene.ids('unlabeled')
    unlabeled_set = make_dataset(scene, unlabeled_ids, patch, with_spectra=False, with_labels=False)
    test_set = make_dataset(scene, scene.ids('test'), patch, with_spectra=False)

    steps = int(math.ceil(max(len(train_set), len(unlabeled_set)) * 1.0 / batch_size))
    train_sampler = SeededSampler(train_set, seed, num_samples=steps * batch_size)
    train_loader = DataLoader(train_set, batch_size=batch_size, sampler=train_sampler,
                              num_workers=config.RUN.NUM_WORKERS, drop_last=True)
    unlabeled_loader = None
    if len(unlabeled_set):
        unlabeled_sampler = SeededSampler(unlabeled_set, seed + 1, num_samples=steps * batch_size)
        unlabeled_loader = DataLoader(unlabeled_set, batch_size=batch_size, sampler=unlabeled_sampler,
                                      num_workers=config.RUN.NUM_WORKERS, drop_last=True)
    logging.info('Loaders: {} labeled, {} unlabeled, {} test pixels, {} steps/epoch of {}'.format(
        len(train_set), len(unlabeled_set), len(test_set), steps, batch_size))
    return Loaders(train_loader, unlabeled_loader, steps, train_set, unlabeled_set, test_set)


def set_epoch(loaders, epoch):
    loaders.train.sampler.set_epoch(epoch)
    if loaders.unlabeled is not None:
        loaders.unlabeled.sampler.set_epoch(epoch)


__all__ = ['Loaders', 'PatchDataset', 'make_dataset', 'setup_loaders', 'set_epoch',
           'generate_scene', 'save_scene', 'load_scene', 'extract_patches', 'raw_pixel_features']
