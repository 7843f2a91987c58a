"""
Reference models the cross-modal network is compared against:
a linear softmax classifier on raw spectra and a unimodal denoising autoencoder
"""

import numpy as np
import torch
import torch.nn as nn

from network import tensor_engine as te
from network.mynn import DEFAULT_SETTINGS, Linear, fc_block, initialize_weights
from network.xmodalnet import Modality1Extractor, PatchDecoder, SoftmaxHead
from utils.errors import DegenerateError, StateError


class SoftmaxClassifier(nn.Module):
    """
    Multinomial logistic regression on standardized features, fit full-batch
    with L-BFGS from zero weights
    """

    def __init__(self, in_features, num_classes, l2=1e-4):
        super(SoftmaxClassifier, self).__init__()
        self.num_classes = num_classes
        self.l2 = l2
        self.cls = Linear(in_features, num_classes)
        self.register_buffer('mean', torch.zeros(in_features, dtype=te.DTYPE))
        self.register_buffer('std', torch.ones(in_features, dtype=te.DTYPE))

    def forward(self, x):
        return te.softmax(self.cls((x - self.mean) / self.std))

    def fit(self, x, y, steps=100):
        x = torch.as_tensor(np.asarray(x), dtype=te.DTYPE)
        y = np.asarray(y, dtype=np.int64)
        if np.unique(y).shape[0] < 2:
            raise DegenerateError('SoftmaxClassifier: training labels hold a single class')
        with torch.no_grad():
            self.mean.copy_(x.mean(dim=0))
            self.std.copy_(x.std(dim=0, unbiased=False).clamp(min=1e-8))
        target = torch.zeros(y.shape[0], self.num_classes, dtype=te.DTYPE)
        target[torch.arange(y.shape[0]), torch.as_tensor(y)] = 1.0

        optimizer = torch.optim.LBFGS(self.parameters(), lr=1.0, max_iter=steps,
                                      line_search_fn='strong_wolfe')

        def closure():
            optimizer.zero_grad()
            loss = te.cross_entropy(self(x), target) + self.l2 * (self.cls.weight ** 2).sum()
            loss.backward()
            return loss

        optimizer.step(closure)
        return self

    def predict_proba(self, x):
        with torch.no_grad():
            return self(torch.as_tensor(np.asarray(x), dtype=te.DTYPE)).numpy()

    def predict(self, x):
        return self.predict_proba(x).argmax(axis=1)


class UnimodalDAE(nn.Module):
    """
    Modality-1 denoising autoencoder with a softmax head on its code.
    Encoder: the cross-modal network's modality-1 extractor plus FC 64.
    """

    def __init__(self, shape, settings=DEFAULT_SETTINGS, **kwargs):
        super(UnimodalDAE, self).__init__()
        self.shape = shape.validate()
        self.initialized = False
        self.extractor = Modality1Extractor(shape.d1, settings)
        self.code = fc_block(64, 64, settings)
        self.decoder = PatchDecoder(64, shape.d1, shape.patch, settings)
        self.head = SoftmaxHead(64, shape.num_classes)

    def encode(self, x):
        return self.code(self.extractor(x))

    def reconstruct(self, x):
        return self.decoder(self.encode(x))

    def forward(self, x):
        return self.head(self.encode(x))

    def init_params(self, rng):
        initialize_weights(self, rng=rng)
        self.initialized = True
        return self

    def predict(self, x, batch_size=1024):
        if not self.initialized:
            raise StateError('UnimodalDAE: parameters were never initialized or loaded')
        self.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                outs.append(self(x[start:start + batch_size]))
        return torch.cat(outs, dim=0)
