"""
Centroids for OpenSetMargin - Global class centroid bank module.
Tracks per-class source and target centroids with cosine-reweighted incremental updates.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from openset_margin import autodiff as ad
from openset_margin.errors import ContractError
from openset_margin.model import predict

logger = logging.getLogger('OpenSetMargin.Centroids')

NORM_EPS = 1e-12


def rho(u, v):
    """Cosine similarity mapped onto [0, 1]; 0.5 when either vector is (near) zero"""
    u = np.ravel(u)
    v = np.ravel(v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        logger.debug("rho of a zero-norm vector, using 0.5")
        return 0.5
    cos = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    return (cos + 1.0) / 2.0


def rho_rows(x, anchor):
    """
    Differentiable rho between every row of x and a fixed anchor vector

    Args:
        x (TensorNode): Rows of shape (n, m)
        anchor (np.ndarray): Vector of length m, treated as a constant

    Returns:
        TensorNode: Column of shape (n, 1)
    """
    anchor = np.ravel(anchor)
    n_anchor = np.linalg.norm(anchor)
    if n_anchor < NORM_EPS:
        return ad.constant(np.full((x.shape[0], 1), 0.5))
    dot = x @ ad.constant(anchor.reshape(-1, 1))
    norms = ad.clamp_min(ad.sqrt(ad.sum(ad.square(x), axis=1)), NORM_EPS)
    cos = ad.div(dot, ad.scale(norms, n_anchor))
    return ad.scale(ad.add(cos, ad.constant(1.0)), 0.5)


@dataclass
class CentroidBank:
    """Source and target centroids of the N known classes"""

    c_s: np.ndarray
    c_t: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.c_s = np.array(self.c_s, dtype=np.float64)
        self.c_t = np.array(self.c_t, dtype=np.float64)
        if self.c_s.shape != self.c_t.shape or self.c_s.ndim != 2:
            raise ContractError(f"centroid banks must share an (N, m) shape, got {self.c_s.shape} and {self.c_t.shape}")

    @property
    def n_known(self):
        return self.c_s.shape[0]

    @property
    def feature_dim(self):
        return self.c_s.shape[1]

    def copy(self):
        return CentroidBank(self.c_s.copy(), self.c_t.copy(), self.iteration)

    def gaps(self):
        """Per-class cross-domain distance ||c_s^k - c_t^k||"""
        return np.linalg.norm(self.c_s - self.c_t, axis=1)

    def distance_matrix(self):
        """Entry [j, k] is ||c_t^j - c_s^k||"""
        return np.linalg.norm(self.c_t[:, None, :] - self.c_s[None, :, :], axis=2)

    def to_dict(self):
        return {'c_s': self.c_s.tolist(), 'c_t': self.c_t.tolist(), 'iteration': self.iteration}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data['c_s']), np.array(data['c_t']), int(data['iteration']))


def class_means(features, labels, n_classes):
    """Mean feature of every class in range(n_classes) that has members"""
    labels = np.asarray(labels)
    return {k: features[labels == k].mean(axis=0) for k in range(n_classes) if np.any(labels == k)}


def init_bank(params, source, target):
    """
    Global centroids from an eval-mode pass over both domains

    Source centroids use true labels; target centroids use argmax pseudo-labels. A class with
    no target pseudo-members starts from its source centroid.
    """
    n_known = params.n_known
    feats_s, _ = predict(params, source.features)
    feats_t, pseudo_t = predict(params, target.features)

    means_s = class_means(feats_s, source.labels, n_known)
    missing = [k for k in range(n_known) if k not in means_s]
    if missing:
        raise ContractError(f"source set has no samples of known classes {missing}")
    c_s = np.stack([means_s[k] for k in range(n_known)])

    means_t = class_means(feats_t, pseudo_t, n_known)
    c_t = c_s.copy()
    for k in range(n_known):
        if k in means_t:
            c_t[k] = means_t[k]
        else:
            logger.warning(f"No target sample pseudo-labeled as class {k}; starting from its source centroid")
    return CentroidBank(c_s, c_t, 0)


def update_bank(bank, local_source, local_target, rho_fn: Callable = rho):
    """
    Reweighted incremental update of the bank from mini-batch centroids

    Args:
        bank (CentroidBank): Centroids of the previous iteration
        local_source (dict): Class -> mini-batch source centroid
        local_target (dict): Class -> mini-batch target centroid (by pseudo-label)
        rho_fn (callable): Weighting function, rho by default

    Returns:
        CentroidBank: Updated copy; classes absent from the mini-batch keep their centroids
    """
    new = bank.copy()
    for k, a in local_source.items():
        r = rho_fn(a, bank.c_s[k])
        new.c_s[k] = r * np.asarray(a) + (1.0 - r) * bank.c_s[k]
    for k, a in local_target.items():
        # the target weight compares against the source centroid
        r = rho_fn(a, bank.c_s[k])
        new.c_t[k] = r * np.asarray(a) + (1.0 - r) * bank.c_t[k]
    new.iteration = bank.iteration + 1
    return new


@dataclass
class LiveCentroids:
    """Updated centroids as graph nodes: the mini-batch part carries gradient, the history is constant"""

    source: List[ad.TensorNode]
    target: List[ad.TensorNode]
    iteration: int = 0

    def to_bank(self):
        return CentroidBank(np.vstack([c.data for c in self.source]),
                            np.vstack([c.data for c in self.target]), self.iteration)


def _blend(batch_rows, anchor, previous):
    local = ad.mean(batch_rows, axis=0)
    r = rho_rows(local, anchor)
    return ad.add(ad.mul(r, local), ad.mul(ad.sub(ad.constant(1.0), r), ad.constant(previous)))


def live_update(bank, features_s, labels_s, features_t, pseudo_t):
    """
    Same update as update_bank, built inside the graph so the alignment loss can move G

    Args:
        bank (CentroidBank): Centroids of the previous iteration
        features_s (TensorNode): Source mini-batch features
        labels_s (np.ndarray): Source labels
        features_t (TensorNode): Target mini-batch features
        pseudo_t (np.ndarray): Target pseudo-labels in {0..N}
    """
    labels_s = np.asarray(labels_s)
    pseudo_t = np.asarray(pseudo_t)
    source, target = [], []
    for k in range(bank.n_known):
        rows_s = np.flatnonzero(labels_s == k)
        if len(rows_s):
            source.append(_blend(ad.take_rows(features_s, rows_s), bank.c_s[k], bank.c_s[k].reshape(1, -1)))
        else:
            source.append(ad.constant(bank.c_s[k].reshape(1, -1)))
        rows_t = np.flatnonzero(pseudo_t == k)
        if len(rows_t):
            target.append(_blend(ad.take_rows(features_t, rows_t), bank.c_s[k], bank.c_t[k].reshape(1, -1)))
        else:
            target.append(ad.constant(bank.c_t[k].reshape(1, -1)))
    return LiveCentroids(source, target, bank.iteration + 1)
