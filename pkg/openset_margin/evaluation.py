"""
Evaluation for OpenSetMargin - Open-set accuracy module.
Computes OS, OS*, ALL and UNK from an (N+1)-class confusion matrix and dumps feature embeddings.
"""

import csv
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from openset_margin.data import eval_labels
from openset_margin.errors import ContractError, OpenSetMarginError
from openset_margin.model import predict

logger = logging.getLogger('OpenSetMargin.Evaluation')


def _json_float(value):
    return None if math.isnan(value) else float(value)


def _mean_present(values):
    present = [v for v in values if not math.isnan(v)]
    return float(np.mean(present)) if present else float('nan')


@dataclass
class MetricsRecord:
    """Accuracies in percent; per_class has N+1 entries, the last one for the unknown class"""

    os: float
    os_star: float
    all: float
    unk: float
    per_class: List[float]
    confusion: List[List[int]]
    epoch: Optional[int] = None

    def to_dict(self):
        return {
            'os': _json_float(self.os),
            'os_star': _json_float(self.os_star),
            'all': _json_float(self.all),
            'unk': _json_float(self.unk),
            'per_class': [_json_float(v) for v in self.per_class],
            'confusion': [[int(c) for c in row] for row in self.confusion],
            'epoch': self.epoch,
        }

    @classmethod
    def from_dict(cls, data):
        def _value(v):
            return float('nan') if v is None else float(v)

        return cls(_value(data['os']), _value(data['os_star']), _value(data['all']), _value(data['unk']),
                   [_value(v) for v in data['per_class']], data['confusion'], data.get('epoch'))

    def summary_line(self):
        return f"OS {self.os:.1f} | OS* {self.os_star:.1f} | ALL {self.all:.1f} | UNK {self.unk:.1f}"


def confusion_matrix(truth, predicted, n_classes):
    """Counts with rows indexed by true class and columns by predicted class"""
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape:
        raise ContractError(f"true labels {truth.shape} and predictions {predicted.shape} differ in shape")
    for name, labels in (('true', truth), ('predicted', predicted)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ContractError(f"{name} labels must lie in 0..{n_classes - 1}, "
                                f"got range {labels.min()}..{labels.max()}")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (truth, predicted), 1)
    return matrix


def metrics_from_confusion(confusion, epoch=None):
    """
    Open-set metrics from an (N+1)x(N+1) confusion matrix

    Classes without ground-truth members get a NaN accuracy and are left out of the means.

    Args:
        confusion (array-like): Counts, rows = true class, last row/column = unknown
        epoch (int): Optional epoch tag

    Returns:
        MetricsRecord: Metrics in percent
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1] or confusion.shape[0] < 2:
        raise ContractError(f"confusion matrix must be square with at least 2 classes, got {confusion.shape}")
    total = int(confusion.sum())
    if total == 0:
        raise ContractError("confusion matrix is empty; nothing to evaluate")

    support = confusion.sum(axis=1)
    per_class = []
    for k in range(confusion.shape[0]):
        if support[k] == 0:
            per_class.append(float('nan'))
        else:
            per_class.append(100.0 * confusion[k, k] / support[k])
    empty = [k for k in range(confusion.shape[0]) if support[k] == 0]
    if empty:
        logger.warning(f"Classes {empty} have no samples and are excluded from the per-class means")

    return MetricsRecord(
        os=_mean_present(per_class),
        os_star=_mean_present(per_class[:-1]),
        all=100.0 * float(np.trace(confusion)) / total,
        unk=per_class[-1],
        per_class=per_class,
        confusion=confusion.tolist(),
        epoch=epoch,
    )


def evaluate(params, dataset, epoch=None):
    """Eval-mode argmax predictions over N+1 classes scored against collapsed labels"""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    n_known = params.n_known
    _, predicted = predict(params, dataset.features)
    truth = eval_labels(dataset.labels, n_known)
    return metrics_from_confusion(confusion_matrix(truth, predicted, n_known + 1), epoch)


def dump_embeddings(params, datasets, path):
    """
    Write feature-layer values of every sample for external plotting

    Args:
        params (NetworkParams): Trained network
        datasets (list): Datasets to dump, in order
        path (str): Output CSV path
    """
    n_known = params.n_known
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['domain', 'true_label', 'eval_label', 'pseudo_label']
                            + [f"f{j}" for j in range(params.feature_dim)])
            for dataset in datasets:
                features, predicted = predict(params, dataset.features)
                collapsed = eval_labels(dataset.labels, n_known)
                for row, raw, label, pseudo in zip(features, dataset.labels, collapsed, predicted):
                    writer.writerow([dataset.domain, int(raw), int(label), int(pseudo)] + ['%.17g' % v for v in row])
    except OSError as e:
        raise OpenSetMarginError(f"cannot write embeddings to {path}: {e}") from e
    logger.info(f"Embeddings written to {path}")
