"""
Seeded epoch sampler
"""
import math

import torch
from torch.utils.data import Sampler


class SeededSampler(Sampler):
    """Sampler yielding a permutation fixed by (seed, epoch).

    Arguments:
        dataset: Dataset used for sampling.
        seed: base seed of the run.
        num_samples (optional): length of one epoch. Longer than the dataset
            means the dataset is cycled, each pass with its own permutation.
        permutation: shuffle (True) or yield indices in order.
    """

    def __init__(self, dataset, seed, num_samples=None, permutation=True):
        self.dataset = dataset
        self.seed = int(seed)
        self.epoch = 0
        self.permutation = permutation
        self.num_samples = len(dataset) if num_samples is None else int(num_samples)

    def __iter__(self):
        # deterministically shuffle based on seed and epoch
        g = torch.Generator()
        g.manual_seed(self.seed * 100003 + self.epoch)

        n = len(self.dataset)
        passes = int(math.ceil(self.num_samples * 1.0 / n)) if n else 0
        indices = []
        for _ in range(passes):
            if self.permutation:
                indices += torch.randperm(n, generator=g).tolist()
            else:
                indices += list(range(n))
        indices = indices[:self.num_samples]
        assert len(indices) == self.num_samples

        return iter(indices)

    def __len__(self):
        return self.num_samples

    def set_epoch(self, epoch):
        self.epoch = epoch
