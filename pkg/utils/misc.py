"""
Miscellanous Functions
"""

import csv
import logging
import os
from datetime import datetime

import numpy as np
from tensorboardX import SummaryWriter

from utils.errors import ContractError


def fast_hist(label_pred, label_true, num_classes):
    """
    Confusion matrix, rows = ground truth, columns = prediction
    """
    label_pred = np.asarray(label_pred, dtype=np.int64)
    label_true = np.asarray(label_true, dtype=np.int64)
    mask = (label_true >= 0) & (label_true < num_classes)
    hist = np.bincount(
        num_classes * label_true[mask] +
        label_pred[mask], minlength=num_classes ** 2).reshape(num_classes, num_classes)
    return hist


def per_class_iu(hist):
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.diag(hist) / (hist.sum(1) + hist.sum(0) - np.diag(hist))


def evaluate_hist(hist):
    """
    (pixel acc, mIoU over classes present in the split, per-class IoU)
    """
    total = hist.sum()
    if total == 0:
        raise ContractError('cannot evaluate an empty split')
    acc = np.diag(hist).sum() / float(total)
    iu = per_class_iu(hist)
    present = hist.sum(axis=1) > 0
    mean_iu = float(np.nan_to_num(iu[present]).mean())
    return float(acc), mean_iu, iu


def save_log(prefix, output_dir, date_str):
    fmt = '%(asctime)s.%(msecs)03d %(message)s'
    date_fmt = '%m-%d %H:%M:%S'
    filename = os.path.join(output_dir, prefix + '_' + date_str + '.log')
    print("Logging :", filename)
    root = logging.getLogger('')
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.INFO)
    formatter = logging.Formatter(fmt=fmt, datefmt=date_fmt)
    fh = logging.FileHandler(filename, mode='w')
    fh.setFormatter(formatter)
    root.addHandler(fh)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO)
    console.setFormatter(formatter)
    root.addHandler(console)
    return filename


def prep_experiment(out_dir, tensorboard=True):
    """
    Make output directories, setup logging and Tensorboard.
    """
    date_str = str(datetime.now().strftime('%Y_%m_%d_%H_%M_%S'))
    os.makedirs(out_dir, exist_ok=True)
    save_log('log', out_dir, date_str)
    if tensorboard:
        tb_path = os.path.join(out_dir, 'tb')
        os.makedirs(tb_path, exist_ok=True)
        return SummaryWriter(log_dir=tb_path)
    return None


def print_evaluate_results(hist, iu, dataset_name=None):
    iu_false_positive = hist.sum(axis=0) - np.diag(hist)
    iu_false_negative = hist.sum(axis=1) - np.diag(hist)
    iu_true_positive = np.diag(hist)

    logging.info('Split: {}'.format(dataset_name))
    logging.info('IoU:')
    logging.info('label_id    iU    Precision Recall TP     FP    FN')
    total_pixels = hist.sum()
    with np.errstate(divide='ignore', invalid='ignore'):
        for idx, i in enumerate(iu):
            idx_string = "{:2d}".format(idx)
            iu_string = '{:5.1f}'.format(i * 100)
            tp = '{:5.1f}'.format(100 * iu_true_positive[idx] / total_pixels)
            fp = '{:5.1f}'.format(100 * iu_false_positive[idx] / total_pixels)
            fn = '{:5.1f}'.format(100 * iu_false_negative[idx] / total_pixels)
            precision = '{:5.2f}'.format(
                iu_true_positive[idx] / (iu_true_positive[idx] + iu_false_positive[idx]))
            recall = '{:5.2f}'.format(
                iu_true_positive[idx] / (iu_true_positive[idx] + iu_false_negative[idx]))
            logging.info('{}       {}  {}     {}  {}   {}   {}'.format(
                idx_string, iu_string, precision, recall, tp, fp, fn))


def write_csv(path, header, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


class AverageMeter(object):

    def __init__(self):
        self.reset()

    def reset(self):
        self.val = 0
        self.avg = 0
        self.sum = 0
        self.count = 0

    def update(self, val, n=1):
        self.val = val
        self.sum += val * n
        self.count += n
        self.avg = self.sum / self.count
