"""
Dense float64 tensor primitives with reverse-mode differentiation

Values are torch tensors and gradients come from torch autograd. This module
adds what the rest of the code relies on: shape contracts with readable
errors, finiteness checks, seeded randomness for dropout and init, and an
optional Tape that records which primitives ran and in which order.
"""
import threading

import numpy as np
import torch
import torch.nn.functional as F

from utils.errors import ContractError, DegenerateError, DimensionError, NumericError, ParameterError


DTYPE = torch.float64
# the engine runs in 64-bit throughout
torch.set_default_dtype(DTYPE)

LOG_FLOOR = 1e-12
ROW_SUM_TOL = 1e-6


class RngState(object):
    """
    Seeded random source. Same seed and same sequence of draws give
    bit-identical results.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.generator = torch.Generator()
        self.generator.manual_seed(self.seed)

    def fork(self, offset):
        """
        Independent stream derived from this seed, e.g. one per epoch
        """
        return RngState((self.seed * 1000003 + int(offset)) % (2 ** 63))

    def numpy(self, offset=0):
        return np.random.default_rng([self.seed, int(offset)])

    def get_state(self):
        return self.generator.get_state()

    def set_state(self, state):
        self.generator.set_state(state)

    def __repr__(self):
        return 'RngState(seed={})'.format(self.seed)


class Tape(object):
    """
    Ordered record of executed primitives.

    Inside `with Tape() as tape:` every engine op run by the same thread appends
    (name, inputs, output) in execution order; `backward` then walks torch's
    graph in reverse.
    """

    _local = threading.local()

    @classmethod
    def active(cls):
        if not hasattr(cls._local, 'tapes'):
            cls._local.tapes = []
        return cls._local.tapes

    def __init__(self):
        self.ops = []
        self._grad_ctx = None

    def __enter__(self):
        Tape.active().append(self)
        self._grad_ctx = torch.enable_grad()
        self._grad_ctx.__enter__()
        return self

    def __exit__(self, *exc):
        self._grad_ctx.__exit__(*exc)
        Tape.active().remove(self)
        return False

    def record(self, name, inputs, output):
        self.ops.append((name, tuple(inputs), output))

    @property
    def names(self):
        return [op[0] for op in self.ops]

    def __len__(self):
        return len(self.ops)

    def produced(self, tensor):
        return any(op[2] is tensor for op in self.ops)

    def covers(self, tensor):
        """
        True if a recorded op lies in the autograd ancestry of `tensor`
        """
        recorded = set(op[2].grad_fn for op in self.ops if op[2].grad_fn is not None)
        seen = set()
        stack = [tensor.grad_fn]
        while stack:
            fn = stack.pop()
            if fn is None or fn in seen:
                continue
            if fn in recorded:
                return True
            seen.add(fn)
            stack.extend(next_fn for next_fn, _ in fn.next_functions)
        return False


def _record(name, inputs, output):
    for tape in Tape.active():
        tape.record(name, inputs, output)
    return output


def assert_finite(name, *tensors):
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise NumericError('{}: non-finite values in input of shape {}'.format(name, tuple(t.shape)))


def tensor(data, requires_grad=False):
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a, b):
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul', a.shape, b.shape)
    return _record('matmul', (a, b), a @ b)


def linear(x, weight, bias=None):
    """
    x @ weight^T + bias with weight stored as (out, in)
    """
    if x.dim() != 2 or weight.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError('linear', x.shape, weight.shape)
    out = x @ weight.t()
    if bias is not None:
        out = out + bias
    return _record('linear', (x, weight, bias), out)


def conv2d(x, kernel, bias=None, padding=None):
    """
    Cross-correlation with 'same' zero padding; kernel extents must be odd
    """
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError('conv2d', x.shape, kernel.shape)
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError('conv2d: kernel extents must be odd, got {}x{}'.format(kh, kw))
    same = (kh // 2, kw // 2)
    if padding is not None:
        padding = tuple(padding) if isinstance(padding, (tuple, list)) else (padding, padding)
        if padding != same:
            raise ParameterError('conv2d: padding {} does not preserve spatial size, need {}'.format(padding, same))
    out = F.conv2d(x, kernel, bias, padding=same)
    return _record('conv2d', (x, kernel, bias), out)


def tanh(x):
    assert_finite('tanh', x)
    return _record('tanh', (x,), torch.tanh(x))


def sigmoid(x):
    assert_finite('sigmoid', x)
    return _record('sigmoid', (x,), torch.sigmoid(x))


def leaky_relu(x, slope=0.2):
    assert_finite('leaky_relu', x)
    return _record('leaky_relu', (x,), F.leaky_relu(x, slope))


def softmax(x):
    if x.dim() != 2:
        raise DimensionError('softmax', x.shape)
    assert_finite('softmax', x)
    return _record('softmax', (x,), torch.softmax(x, dim=1))


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.99, eps=1e-5):
    """
    Normalizes over the batch (and spatial positions for 4-D input).
    `momentum` is the weight kept by the running statistics per update.
    """
    if x.dim() not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise DimensionError('batch_norm', x.shape, gamma.shape)
    if training and x.shape[0] < 2:
        raise DegenerateError('batch_norm: train mode needs a batch of at least 2, got {}'.format(x.shape[0]))
    out = F.batch_norm(x, running_mean, running_var, gamma, beta, training=training,
                       momentum=1.0 - momentum, eps=eps)
    return _record('batch_norm', (x, gamma, beta), out)


def dropout(x, rate, training, rng=None):
    """
    Inverted dropout; identity in eval mode
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError('dropout: rate must lie in [0, 1), got {}'.format(rate))
    if not training or rate == 0.0:
        return x
    keep = torch.full_like(x, 1.0 - rate)
    mask = torch.bernoulli(keep, generator=rng.generator if rng is not None else None)
    return _record('dropout', (x,), x * mask / (1.0 - rate))


def _check_rows(name, rows):
    sums = rows.detach().sum(dim=1)
    if bool((sums - 1.0).abs().max() > ROW_SUM_TOL):
        raise ContractError('{}: rows must sum to 1 (worst row sum {:.8f})'.format(
            name, float(sums[(sums - 1.0).abs().argmax()])))


def cross_entropy(pred, target):
    """
    Batch mean of -sum_c target * log(pred) with pred/target as probability rows
    """
    if pred.shape != target.shape or pred.dim() != 2:
        raise DimensionError('cross_entropy', pred.shape, target.shape)
    _check_rows('cross_entropy pred', pred)
    _check_rows('cross_entropy target', target)
    out = -(target * torch.log(pred.clamp(min=LOG_FLOOR))).sum(dim=1).mean()
    return _record('cross_entropy', (pred, target), out)


def mse(x, x_hat):
    """
    Sum of squared differences divided by batch size
    """
    if x.shape != x_hat.shape:
        raise DimensionError('mse', x.shape, x_hat.shape)
    out = ((x - x_hat) ** 2).sum() / x.shape[0]
    return _record('mse', (x, x_hat), out)


def concat(a, b, axis=0):
    if a.dim() != b.dim() or any(a.shape[d] != b.shape[d] for d in range(a.dim()) if d != axis):
        raise DimensionError('concat', a.shape, b.shape)
    return _record('concat', (a, b), torch.cat((a, b), dim=axis))


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError('add', a.shape, b.shape)
    return _record('add', (a, b), a + b)


def global_avg_pool(x):
    """
    (batch, ch, h, w) -> (batch, ch)
    """
    if x.dim() != 4:
        raise DimensionError('global_avg_pool', x.shape)
    return _record('global_avg_pool', (x,), x.mean(dim=(2, 3)))


def backward(loss, tape=None):
    """
    Populate .grad of every leaf that requires grad; gradients accumulate
    across calls until zeroed.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError('backward: loss must be a scalar, got shape {}'.format(tuple(loss.shape)))
    if tape is not None and not tape.covers(loss):
        raise ContractError('backward: no recorded op of the tape leads to the loss')
    loss.backward()
