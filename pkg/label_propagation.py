"""
Graph label propagation

Dense Gaussian-kernel graph over tap-layer features, row-normalized transfer
matrix and clamped power iteration

    Y <- P Y ;  Y[:M] <- Y0[:M]

repeated until the iterate stops moving. Labeled rows come first.
"""
import collections
import logging
import os

import numpy as np
from scipy.spatial.distance import cdist

from utils.errors import ContractError, ConvergenceError, DegenerateError, ParameterError


ROW_TOL = 1e-9
# change below which an iterate is at the floating point floor
DELTA_FLOOR = 1e-14
# smallest kernel value; far pairs underflow to this instead of 0
KERNEL_FLOOR = np.finfo(np.float64).tiny

PropagationResult = collections.namedtuple('PropagationResult', ['Y', 'iterations', 'delta'])


class PseudoLabelState(object):
    """
    Y: (N, C) soft labels, the first M rows clamped to Y0[:M]
    S, P: (N, N) similarity / transfer matrices of the last propagation
    round: number of refreshes so far
    """

    def __init__(self, Y, M, sigma, S=None, P=None, round=0, Y_l=None):
        self.Y = np.asarray(Y, dtype=np.float64)
        self.M = int(M)
        self.sigma = float(sigma)
        self.S = S
        self.P = P
        self.round = int(round)
        self.Y_l = (np.array(self.Y[:self.M]) if Y_l is None else np.asarray(Y_l, dtype=np.float64))
        _check_distribution('PseudoLabelState', self.Y)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def num_classes(self):
        return self.Y.shape[1]

    @property
    def Y_u(self):
        return self.Y[self.M:]

    def hard_labels(self):
        return self.Y.argmax(axis=1)

    def replace(self, **kwargs):
        fields = dict(Y=self.Y, M=self.M, sigma=self.sigma, S=self.S, P=self.P,
                      round=self.round, Y_l=self.Y_l)
        fields.update(kwargs)
        return PseudoLabelState(**fields)


def _check_distribution(name, Y):
    if Y.ndim != 2:
        raise ContractError('{}: label matrix must be 2-D, got shape {}'.format(name, Y.shape))
    if Y.shape[0] and np.abs(Y.sum(axis=1) - 1.0).max() > ROW_TOL:
        raise ContractError('{}: label rows must sum to 1'.format(name))


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def similarity_matrix(features, sigma):
    """
    S_ij = exp(-||x_i - x_j||^2 / sigma^2), floored at KERNEL_FLOOR so every
    entry stays in (0, 1]. Floored pairs are numerically disconnected.
    """
    if sigma <= 0:
        raise ParameterError('similarity_matrix: sigma must be > 0, got {}'.format(sigma))
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError('similarity_matrix: need an (N, f) feature matrix, got {}'.format(features.shape))
    S = np.maximum(np.exp(-cdist(features, features, 'sqeuclidean') / (sigma * sigma)), KERNEL_FLOOR)
    np.fill_diagonal(S, 1.0)
    return S


def transfer_matrix(S):
    """
    P_ij = S_ij / sum_k S_ik
    """
    sums = S.sum(axis=1)
    if np.any(sums <= 0):
        raise DegenerateError('transfer_matrix: row {} has zero similarity mass'.format(int(np.argmin(sums))))
    return S / sums[:, None]


def propagate(P, Y0, M, max_iter=10000, tol=1e-8, history=None):
    """
    Clamped iteration to the fixed point.

    Stops once the max-abs change drops below `tol` and the geometric estimate
    of the remaining distance to the fixed point, delta * r / (1 - r) with r
    the contraction ratio of the last two changes, is below `tol` too.
    `history`, if a list, receives every iterate.
    """
    Y0 = np.asarray(Y0, dtype=np.float64)
    N = Y0.shape[0]
    if P.shape != (N, N):
        raise ContractError('propagate: P of shape {} does not match {} label rows'.format(P.shape, N))
    if not 0 <= M <= N:
        raise ContractError('propagate: labeled count {} outside [0, {}]'.format(M, N))
    _check_distribution('propagate', Y0)

    Y = Y0.copy()
    if history is not None:
        history.append(Y.copy())
    if M == N or N == 0:
        return PropagationResult(Y, 0, 0.0)

    clamp = Y0[:M]
    prev_delta = None
    delta = float('inf')
    for it in range(1, max_iter + 1):
        Y_next = P.dot(Y)
        Y_next[:M] = clamp
        delta = float(np.abs(Y_next - Y).max())
        Y = Y_next
        if history is not None:
            history.append(Y.copy())
        if delta <= DELTA_FLOOR:
            return PropagationResult(Y, it, delta)
        if delta < tol and prev_delta is not None and delta < prev_delta:
            r = delta / prev_delta
            if delta * r / (1.0 - r) < tol:
                return PropagationResult(Y, it, delta)
        prev_delta = delta
    raise ConvergenceError('propagate: no convergence after {} iterations'.format(max_iter), delta)


def closed_form(P, Y0, M):
    """
    Y_u = (I - P_uu)^-1 P_ul Y_l

    Raises DegenerateError when some unlabeled block has no numerical path to
    a labeled row and the system is singular.
    """
    Y = np.array(Y0, dtype=np.float64)
    if M == Y.shape[0]:
        return Y
    P_uu = P[M:, M:]
    P_ul = P[M:, :M]
    try:
        Y_u = np.linalg.solve(np.eye(P_uu.shape[0]) - P_uu, P_ul.dot(Y[:M]))
    except np.linalg.LinAlgError:
        raise DegenerateError('closed_form: I - P_uu is singular')
    if not np.isfinite(Y_u).all() or Y_u.min() < -ROW_TOL or np.abs(Y_u.sum(axis=1) - 1.0).max() > ROW_TOL:
        raise DegenerateError('closed_form: I - P_uu is too ill-conditioned for a direct solve')
    Y[M:] = np.clip(Y_u, 0.0, None)
    return Y


def select_sigma(features_l, labels_l, grid, folds=5, rng=None, max_iter=10000, tol=1e-8):
    """
    k-fold cross-validation over the labeled rows: each held-out fold starts
    uniform and is labeled by propagation from the rest. Ties go to the
    smaller sigma.
    """
    labels_l = np.asarray(labels_l, dtype=np.int64)
    classes = np.unique(labels_l)
    if classes.shape[0] < 2:
        raise DegenerateError('select_sigma: labeled rows hold a single class')
    grid = sorted(set(float(g) for g in grid))
    if len(grid) == 1:
        return grid[0]

    num_classes = int(labels_l.max()) + 1
    M = labels_l.shape[0]
    k = max(2, min(int(folds), M))
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(M)
    splits = np.array_split(order, k)

    best_sigma, best_acc = grid[0], -1.0
    for sigma in grid:
        correct = 0
        for held in splits:
            keep = np.setdiff1d(order, held, assume_unique=True)
            idx = np.concatenate([keep, held])
            Y0 = np.full((M, num_classes), 1.0 / num_classes)
            Y0[:keep.shape[0]] = one_hot(labels_l[keep], num_classes)
            P = transfer_matrix(similarity_matrix(features_l[idx], sigma))
            try:
                Y = propagate(P, Y0, keep.shape[0], max_iter=max_iter, tol=tol).Y
            except ConvergenceError as e:
                logging.warning('select_sigma: sigma=%g did not converge (last delta %.3e)', sigma, e.last_delta)
                correct = -1
                break
            correct += int((Y[keep.shape[0]:].argmax(axis=1) == labels_l[held]).sum())
        acc = correct / float(M)
        logging.info('select_sigma: sigma=%g holdout acc=%.4f', sigma, acc)
        if acc > best_acc:
            best_sigma, best_acc = sigma, acc
    return best_sigma


def initial_pseudo_labels(features_l, y_l, features_u, num_classes, steps=100):
    """
    One-hot predictions of a linear softmax classifier fit on the labeled rows
    """
    from network.baseline import SoftmaxClassifier

    features_u = np.asarray(features_u, dtype=np.float64)
    if features_u.shape[0] == 0:
        return np.zeros((0, num_classes))
    clf = SoftmaxClassifier(np.asarray(features_l).shape[1], num_classes)
    clf.fit(features_l, y_l, steps=steps)
    return one_hot(clf.predict(features_u), num_classes)


def build_state(Y_l, Y_u, sigma):
    """
    Round-0 state from clamped labels and initial pseudo-labels
    """
    Y = np.concatenate([np.asarray(Y_l, dtype=np.float64), np.asarray(Y_u, dtype=np.float64)], axis=0)
    return PseudoLabelState(Y, np.asarray(Y_l).shape[0], sigma)


def refresh_pseudo_labels(state, new_features, max_iter=10000, tol=1e-8, history=None):
    """
    Rebuild the graph on `new_features` (labeled rows first), re-propagate
    from the current labels and count unlabeled rows whose argmax moved
    """
    new_features = np.asarray(new_features, dtype=np.float64)
    if new_features.shape[0] != state.N:
        raise ContractError('refresh_pseudo_labels: {} feature rows for {} samples'.format(
            new_features.shape[0], state.N))
    S = similarity_matrix(new_features, state.sigma)
    P = transfer_matrix(S)
    Y0 = state.Y.copy()
    Y0[:state.M] = state.Y_l
    try:
        result = propagate(P, Y0, state.M, max_iter=max_iter, tol=tol, history=history)
    except ConvergenceError as e:
        logging.warning('LP round {}: no convergence in {} iterations (last delta {:.3e}), '
                        'solving directly'.format(state.round + 1, max_iter, e.last_delta))
        result = PropagationResult(closed_form(P, Y0, state.M), max_iter, e.last_delta)
        if history is not None:
            history.append(result.Y.copy())
    new_state = state.replace(Y=result.Y, S=S, P=P, round=state.round + 1)
    changed = int((new_state.hard_labels()[state.M:] != state.hard_labels()[state.M:]).sum())
    logging.info('LP round {}: {} iterations, last delta {:.3e}, {} pseudo-labels changed'.format(
        state.round + 1, result.iterations, result.delta, changed))
    return new_state, changed


def check_dense_cap(N, max_n):
    if N > max_n:
        raise ParameterError('label propagation over {} samples exceeds the dense cap of {}; '
                             'use --subsample'.format(N, max_n))


def cap_unlabeled(ids_u, M, max_n, rng):
    """
    Uniformly subsample unlabeled ids so that M + U <= max_n
    """
    room = max_n - M
    if room <= 0:
        raise ParameterError('{} labeled samples already exceed the dense cap of {}'.format(M, max_n))
    if ids_u.shape[0] <= room:
        return ids_u
    logging.info('Subsampling unlabeled pool from {} to {}'.format(ids_u.shape[0], room))
    return np.sort(rng.choice(ids_u, size=room, replace=False))


def dump_state(state, out_dir, prefix='lp'):
    """
    Write S, P and Y of a state as containers for audit
    """
    from datasets.container import write_container

    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    for name in ('S', 'P', 'Y'):
        value = getattr(state, name)
        if value is not None:
            write_container(os.path.join(out_dir, '{}_round{}_{}.xmdt'.format(prefix, state.round, name)), value)
