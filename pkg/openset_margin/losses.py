"""
Losses for OpenSetMargin - Training objective module.
Classification, adversarial, contrastive-center, center-alignment and contrastive-mapping losses
and their weighted total.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from openset_margin import autodiff as ad
from openset_margin.centroids import CentroidBank, LiveCentroids, rho_rows
from openset_margin.errors import ConfigValidationError, ContractError

logger = logging.getLogger('OpenSetMargin.Losses')


@dataclass(frozen=True)
class LossWeights:
    """Weights and shape parameters of the total objective"""

    lambda_s: float = 0.02
    lambda_c: float = 0.005
    lambda_t: float = 1e-4
    omega: float = 0.5
    delta: float = 1e-6
    adv_lambda: float = 1.0
    literal_dist: bool = False

    def __post_init__(self):
        for name in ('lambda_s', 'lambda_c', 'lambda_t', 'omega', 'adv_lambda'):
            value = getattr(self, name)
            if not value >= 0.0:
                raise ConfigValidationError(f"{name} must be >= 0, got {value}", field=name)
        if not self.delta > 0.0:
            raise ConfigValidationError(f"delta must be > 0, got {self.delta}", field='delta')


@dataclass(frozen=True)
class MarginVector:
    """Per-known-class repulsion radius"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if np.any(values < 0.0) or not np.all(np.isfinite(values)):
            raise ContractError(f"margins must be finite and >= 0, got {values.tolist()}")
        object.__setattr__(self, 'values', values)

    @classmethod
    def static(cls, value, n_known):
        return cls(np.full(n_known, float(value)))

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, k):
        return float(self.values[k])


def _one_hot(labels, width):
    out = np.zeros((len(labels), width))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_source_labels(labels, n_known):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_known):
        raise ContractError(f"source labels must lie in 0..{n_known - 1}, got range "
                            f"[{labels.min()}, {labels.max()}]; unknown samples never appear in the source")
    return labels


def cls_loss(logits_s, y_s):
    """Mean softmax cross-entropy of source logits over N+1 classes"""
    n, width = logits_s.shape
    labels = _check_source_labels(y_s, width - 1)
    picked = ad.mul(ad.log_softmax_rows(logits_s), ad.constant(_one_hot(labels, width)))
    return ad.scale(ad.sum(picked), -1.0 / n)


def adv_loss(logits_t):
    """
    Binary cross-entropy pinning the unknown-class probability at one half

    Args:
        logits_t (TensorNode): Target logits of shape (n, N+1)

    Returns:
        TensorNode: Mean over the batch of -log(p)/2 - log(1-p)/2 with p the class-N probability
    """
    n, width = logits_t.shape
    p = ad.take_cols(ad.softmax_rows(logits_t), [width - 1])
    q = ad.sub(ad.constant(1.0), p)
    return ad.scale(ad.add(ad.sum(ad.log(p)), ad.sum(ad.log(q))), -0.5 / n)


def ada_terms(logits_s, y_s, features_t, discriminator, adv_lambda=1.0):
    """Classification and adversarial terms, the latter seen by G through gradient reversal"""
    reversed_t = ad.grad_reverse(features_t, adv_lambda)
    return cls_loss(logits_s, y_s), adv_loss(discriminator(reversed_t))


def ada_objective(logits_s, y_s, features_t, discriminator, adv_lambda=1.0):
    """
    Adversarial adaptation objective in one scalar

    D descends on the adversarial term while G, behind the reversal node, ascends on it,
    so one backward pass serves both players.

    Args:
        logits_s (TensorNode): Source logits
        y_s (np.ndarray): Source labels
        features_t (TensorNode): Target features G(E(x_t))
        discriminator (callable): Maps a feature node to N+1 logits
        adv_lambda (float): Gradient reversal multiplier

    Returns:
        TensorNode: 1x1 loss
    """
    cls, adv = ada_terms(logits_s, y_s, features_t, discriminator, adv_lambda)
    return ad.add(cls, adv)


def _sq_dist_to(features, centroid):
    """Column of squared distances from every row to a constant centroid"""
    diff = ad.sub(features, ad.constant(np.reshape(centroid, (1, -1))))
    return ad.sum(ad.square(diff), axis=1)


def contrastive_center_loss(features_s, y_s, c_s, delta=1e-6):
    """
    Pull source features to their class centroid relative to the other centroids

    Centroids are constants. The batch sum is divided by the batch size.

    Args:
        features_s (TensorNode): Source features of shape (n, m)
        y_s (np.ndarray): Source labels in 0..N-1
        c_s (np.ndarray): Source centroids of shape (N, m)
        delta (float): Denominator guard

    Returns:
        TensorNode: 1x1 loss
    """
    c_s = np.asarray(c_s, dtype=np.float64)
    n_known = c_s.shape[0]
    if n_known < 2:
        raise ContractError(f"contrastive-center loss needs at least 2 classes, got {n_known}")
    labels = _check_source_labels(y_s, n_known)
    mask = _one_hot(labels, n_known)
    n = features_s.shape[0]

    num = None
    den = None
    for k in range(n_known):
        sq = _sq_dist_to(features_s, c_s[k])
        own = ad.mul(sq, ad.constant(mask[:, k:k + 1]))
        other = ad.mul(sq, ad.constant(1.0 - mask[:, k:k + 1]))
        num = own if num is None else ad.add(num, own)
        den = other if den is None else ad.add(den, other)
    ratio = ad.div(num, ad.add(den, ad.constant(delta)))
    return ad.scale(ad.sum(ratio), 0.5 / n)


def cca_loss(centroids):
    """
    Sum over known classes of the squared source/target centroid gap

    Args:
        centroids (CentroidBank | LiveCentroids): A plain bank gives a constant; live centroids carry
            the mini-batch gradient

    Returns:
        TensorNode: 1x1 loss
    """
    if isinstance(centroids, CentroidBank):
        return ad.constant(float(np.sum((centroids.c_s - centroids.c_t) ** 2)))
    if not isinstance(centroids, LiveCentroids):
        raise ContractError(f"cca_loss expects a CentroidBank or LiveCentroids, got {type(centroids).__name__}")
    total = None
    for c_s, c_t in zip(centroids.source, centroids.target):
        gap = ad.sum(ad.square(ad.sub(c_s, c_t)))
        total = gap if total is None else ad.add(total, gap)
    return total


def adaptive_margins(bank, literal_dist=False):
    """
    M^k = (1/N) * sum over j != k of dist(c_t^j, c_s^k)

    dist is the Euclidean norm, or its square when literal_dist is set.
    """
    dist = bank.distance_matrix()
    if literal_dist:
        dist = dist ** 2
    n_known = bank.n_known
    off_diagonal = dist.sum(axis=0) - np.diag(dist)
    return MarginVector(np.maximum(off_diagonal / n_known, 0.0))


def scm_loss(features_t, pseudo_labels, reliable_mask, c_s, margins, omega=0.5, literal_dist=False):
    """
    Contrastive mapping of reliable target samples around the source centroids

    Reliable samples predicted as known class k are attracted to c_s^k with energy
    (1 - rho)^omega * d^2. Reliable samples predicted unknown pay
    (1/N) * sum_k rho^omega * max(0, M^k - d)^2. The sum is divided by the number of reliable samples.

    Args:
        features_t (TensorNode): Target features of shape (n, m)
        pseudo_labels (np.ndarray): Labels in 0..N, N meaning unknown
        reliable_mask (np.ndarray): Boolean mask of reliable samples
        c_s (np.ndarray): Source centroids of shape (N, m), constants
        margins (MarginVector | array-like): Per-class margins
        omega (float): Reweighting exponent; 0 disables the reweighting
        literal_dist (bool): Use squared distance as dist

    Returns:
        TensorNode: 1x1 loss
    """
    c_s = np.asarray(c_s, dtype=np.float64)
    n_known = c_s.shape[0]
    if not isinstance(margins, MarginVector):
        margins = MarginVector(margins)
    if len(margins) != n_known:
        raise ContractError(f"{len(margins)} margins for {n_known} classes")
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    reliable_mask = np.asarray(reliable_mask, dtype=bool)
    n_reliable = int(reliable_mask.sum())
    if n_reliable == 0:
        logger.debug("No reliable target samples in this batch, contrastive mapping loss skipped")
        return ad.constant(0.0)

    terms = []
    for k in range(n_known):
        rows = np.flatnonzero(reliable_mask & (pseudo_labels == k))
        if not len(rows):
            continue
        x = ad.take_rows(features_t, rows)
        sq = _sq_dist_to(x, c_s[k])
        energy = ad.square(sq) if literal_dist else sq
        weight = ad.power(ad.sub(ad.constant(1.0), rho_rows(x, c_s[k])), omega)
        terms.append(ad.sum(ad.mul(weight, energy)))

    unknown_rows = np.flatnonzero(reliable_mask & (pseudo_labels == n_known))
    if len(unknown_rows):
        x = ad.take_rows(features_t, unknown_rows)
        for k in range(n_known):
            sq = _sq_dist_to(x, c_s[k])
            d = sq if literal_dist else ad.sqrt(sq)
            hinge = ad.relu(ad.sub(ad.constant(margins[k]), d))
            weight = ad.power(rho_rows(x, c_s[k]), omega)
            terms.append(ad.scale(ad.sum(ad.mul(weight, ad.square(hinge))), 1.0 / n_known))

    if not terms:
        return ad.constant(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / n_reliable)


@dataclass
class LossTerms:
    """Loss components of one training iteration"""

    cls: ad.TensorNode
    adv: ad.TensorNode
    cct: Optional[ad.TensorNode] = None
    cca: Optional[ad.TensorNode] = None
    con: Optional[ad.TensorNode] = None

    def values(self):
        """Float value of every component, NaN for the ones not computed"""
        return {name: (getattr(self, name).item() if getattr(self, name) is not None else float('nan'))
                for name in ('cls', 'adv', 'cct', 'cca', 'con')}


def total_loss(terms, weights):
    """
    L_cls + L_adv + lambda_s * L_cct + lambda_c * L_cca + lambda_t * L_con

    Terms with zero weight (or not computed) are left out of the graph, so an ablated term
    contributes nothing to either the value or the gradient.
    """
    total = ad.add(terms.cls, terms.adv)
    for term, weight in ((terms.cct, weights.lambda_s), (terms.cca, weights.lambda_c), (terms.con, weights.lambda_t)):
        if term is None or weight == 0.0:
            continue
        total = ad.add(total, ad.scale(term, weight))
    return total
