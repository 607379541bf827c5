"""
Trainer for OpenSetMargin - Two-stage training loop module.
Pretrains on the labeled source, then jointly optimizes adversarial, alignment and contrastive-mapping losses.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from openset_margin import autodiff as ad
from openset_margin.centroids import CentroidBank, init_bank, live_update
from openset_margin.data import batch_iter
from openset_margin.errors import ConfigValidationError, ContractError, TrainingDivergedError
from openset_margin.evaluation import MetricsRecord, evaluate
from openset_margin.losses import (LossTerms, LossWeights, MarginVector, adaptive_margins, ada_terms, cca_loss,
                                   cls_loss, contrastive_center_loss, scm_loss, total_loss)
from openset_margin.model import forward, init_params

logger = logging.getLogger('OpenSetMargin.Trainer')

LOSS_NAMES = ('cls', 'adv', 'cct', 'cca', 'con')


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule, ablation and seed settings of one training run"""

    lr_init: float = 2e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    epochs_stage1: int = 20
    epochs_stage2: int = 20
    reliability_threshold: Optional[float] = None
    disable_sca: bool = False
    disable_scm: bool = False
    static_margin: Optional[float] = None
    freeze_encoder: bool = True
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs_stage1 < 1:
            raise ConfigValidationError(f"epochs_stage1 must be >= 1, got {self.epochs_stage1}", field='epochs_stage1')
        if self.epochs_stage2 < 1:
            raise ConfigValidationError(f"epochs_stage2 must be >= 1, got {self.epochs_stage2}", field='epochs_stage2')
        if self.batch_size < 2:
            raise ConfigValidationError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}",
                                        field='batch_size')
        if not self.lr_init > 0.0:
            raise ConfigValidationError(f"lr_init must be > 0, got {self.lr_init}", field='lr_init')
        if not self.weight_decay >= 0.0:
            raise ConfigValidationError(f"weight_decay must be >= 0, got {self.weight_decay}", field='weight_decay')
        if self.reliability_threshold is not None and not 0.0 <= self.reliability_threshold < 1.0:
            raise ConfigValidationError(f"reliability_threshold must lie in [0, 1), got {self.reliability_threshold}",
                                        field='reliability_threshold')
        if self.static_margin is not None and not self.static_margin >= 0.0:
            raise ConfigValidationError(f"static_margin must be >= 0, got {self.static_margin}", field='static_margin')
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}", field='seed')

    def effective_weights(self):
        """Loss weights with the ablated terms zeroed"""
        weights = self.weights
        if self.disable_sca:
            weights = replace(weights, lambda_s=0.0, lambda_c=0.0)
        if self.disable_scm:
            weights = replace(weights, lambda_t=0.0)
        return weights

    def threshold_for(self, n_known):
        if self.reliability_threshold is None:
            return 1.0 / (n_known + 1)
        return self.reliability_threshold


@dataclass
class AdamState:
    """First and second moments of every trained parameter"""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state, lr, weight_decay):
    """
    One Adam update with bias correction and decoupled weight decay

    Args:
        params (list): Parameter nodes, updated in place
        grads (list | None): Gradients aligned with params; None reads each node's grad
        state (AdamState): Moments, updated in place
        lr (float): Learning rate of this step
        weight_decay (float): Decay applied as p *= (1 - lr * wd) before the Adam update

    Returns:
        list: The updated params
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ContractError(f"adam_step got {len(params)} params, {len(grads)} grads and {len(state.m)} moments")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


def cosine_lr(step, total_steps, lr_init):
    """lr_init * (1 + cos(pi * step / total_steps)) / 2"""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"cosine_lr needs 0 <= step <= total_steps and total_steps >= 1, "
                            f"got step={step}, total_steps={total_steps}")
    return lr_init * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def pseudo_label(logits_t, threshold):
    """
    Argmax labels over N+1 classes and the mask of samples whose top probability beats the threshold

    Ties go to the lowest class index. The comparison is strict.
    """
    if isinstance(logits_t, ad.TensorNode):
        logits = logits_t.data
    else:
        logits = np.atleast_2d(np.asarray(logits_t, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return np.argmax(probs, axis=1), probs.max(axis=1) > threshold


@dataclass
class EpochRecord:
    """One row of the training trace"""

    stage: int
    epoch: int
    lr: float
    losses: Dict[str, float]
    train_accuracy: Optional[float] = None
    reliable_fraction: Optional[float] = None
    margins: Optional[List[float]] = None
    gaps: Optional[List[float]] = None
    distances: Optional[List[List[float]]] = None
    metrics: Optional[MetricsRecord] = None

    def to_dict(self):
        def _clean(value):
            return None if isinstance(value, float) and math.isnan(value) else value

        return {
            'stage': self.stage,
            'epoch': self.epoch,
            'lr': self.lr,
            'losses': {k: _clean(v) for k, v in self.losses.items()},
            'train_accuracy': self.train_accuracy,
            'reliable_fraction': self.reliable_fraction,
            'margins': self.margins,
            'gaps': self.gaps,
            'distances': self.distances,
            'metrics': self.metrics.to_dict() if self.metrics is not None else None,
        }


@dataclass
class TrainResult:
    params: object
    bank: CentroidBank
    history: List[EpochRecord]
    metrics: MetricsRecord


def _check_finite(values, stage, epoch):
    for name, value in values.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"stage {stage} epoch {epoch}: loss component '{name}' became {value}", component=name)


def _epoch_means(sums, count):
    return {name: (sums[name] / count if count else float('nan')) for name in sums}


def pretrain_stage1(config, source, specs):
    """
    Supervised pretraining of E, G and D on the source domain with the classification loss only

    Args:
        config (TrainConfig): Run settings
        source (Dataset): Labeled source samples
        specs (NetworkSpecs): Network layout

    Returns:
        tuple: (NetworkParams, list of EpochRecord)
    """
    if len(source) == 0:
        raise ContractError("stage 1 needs a nonempty source set")
    params = init_params(specs, config.seed)
    trainable = params.parameters()
    adam = AdamState.for_params(trainable)
    steps_per_epoch = len(batch_iter(len(source), config.batch_size, config.seed, 0))
    if steps_per_epoch == 0:
        raise ConfigValidationError(f"source set of {len(source)} samples yields no batch of size >= 2",
                                    field='batch_size')
    total_steps = config.epochs_stage1 * steps_per_epoch

    history = []
    step = 0
    for epoch in range(config.epochs_stage1):
        sums = {'cls': 0.0}
        correct = 0
        seen = 0
        lr = config.lr_init
        for batch in batch_iter(len(source), config.batch_size, config.seed, epoch):
            lr = cosine_lr(step, total_steps, config.lr_init)
            params.zero_grad()
            _, logits = forward(params, source.features[batch], ad.TRAIN)
            loss = cls_loss(logits, source.labels[batch])
            value = loss.item()
            _check_finite({'cls': value}, 1, epoch + 1)
            ad.backward(loss)
            adam_step(trainable, None, adam, lr, config.weight_decay)
            sums['cls'] += value
            correct += int(np.sum(np.argmax(logits.data, axis=1) == source.labels[batch]))
            seen += len(batch)
            step += 1
        losses = _epoch_means(sums, steps_per_epoch)
        accuracy = 100.0 * correct / seen
        history.append(EpochRecord(stage=1, epoch=epoch + 1, lr=lr, losses=losses, train_accuracy=accuracy))
        logger.info(f"Stage 1 epoch {epoch + 1}/{config.epochs_stage1}: cls {losses['cls']:.4f}, "
                    f"source accuracy {accuracy:.1f}")
    return params, history


def train_stage2(config, params, source, target):
    """
    Joint optimization of the total objective with pseudo-labels, centroid tracking and margins

    The centroid bank is rebuilt from an eval-mode pass at every epoch start and updated by the
    reweighted rule after every iteration.

    Args:
        config (TrainConfig): Run settings
        params (NetworkParams): Stage-1 network, updated in place
        source (Dataset): Labeled source samples
        target (Dataset): Unlabeled target samples (labels used for reporting only)

    Returns:
        tuple: (NetworkParams, CentroidBank, list of EpochRecord)
    """
    n_known = params.n_known
    weights = config.effective_weights()
    threshold = config.threshold_for(n_known)
    trainable = params.parameters(include_encoder=not config.freeze_encoder)
    adam = AdamState.for_params(trainable)

    steps_per_epoch = min(len(batch_iter(len(source), config.batch_size, config.seed, 0)),
                          len(batch_iter(len(target), config.batch_size, config.seed + 1, 0)))
    if steps_per_epoch == 0:
        raise ConfigValidationError("source or target set yields no batch of size >= 2", field='batch_size')
    total_steps = config.epochs_stage2 * steps_per_epoch

    def discriminator(h):
        return params.discriminator.forward(h, ad.TRAIN)

    history = []
    bank = None
    margins = None
    step = 0
    for epoch in range(config.epochs_stage2):
        bank = init_bank(params, source, target)
        seed_epoch = config.epochs_stage1 + epoch
        source_batches = batch_iter(len(source), config.batch_size, config.seed, seed_epoch)
        target_batches = batch_iter(len(target), config.batch_size, config.seed + 1, seed_epoch)
        sums = dict.fromkeys(LOSS_NAMES, 0.0)
        n_reliable = 0
        n_seen = 0
        lr = config.lr_init
        for batch_s, batch_t in zip(source_batches, target_batches):
            lr = cosine_lr(step, total_steps, config.lr_init)
            params.zero_grad()
            y_s = source.labels[batch_s]
            features_s, logits_s = forward(params, source.features[batch_s], ad.TRAIN, config.freeze_encoder)
            features_t, logits_t = forward(params, target.features[batch_t], ad.TRAIN, config.freeze_encoder)
            pseudo, reliable = pseudo_label(logits_t, threshold)

            live = live_update(bank, features_s, y_s, features_t, pseudo)
            updated = live.to_bank()
            if config.static_margin is not None:
                margins = MarginVector.static(config.static_margin, n_known)
            else:
                margins = adaptive_margins(updated, weights.literal_dist)

            cls, adv = ada_terms(logits_s, y_s, features_t, discriminator, weights.adv_lambda)
            terms = LossTerms(
                cls=cls,
                adv=adv,
                cct=contrastive_center_loss(features_s, y_s, updated.c_s, weights.delta),
                cca=cca_loss(live),
                con=scm_loss(features_t, pseudo, reliable, updated.c_s, margins, weights.omega, weights.literal_dist),
            )
            loss = total_loss(terms, weights)
            values = terms.values()
            if not math.isfinite(loss.item()):
                active = {name: values[name] for name in ('cls', 'adv')}
                active.update({name: values[name] for name, w in
                               (('cct', weights.lambda_s), ('cca', weights.lambda_c), ('con', weights.lambda_t)) if w})
                _check_finite(active, 2, epoch + 1)
                raise TrainingDivergedError(f"stage 2 epoch {epoch + 1}: total loss became {loss.item()}",
                                            component='total')
            ad.backward(loss)
            adam_step(trainable, None, adam, lr, config.weight_decay)

            bank = updated
            for name in LOSS_NAMES:
                sums[name] += values[name]
            n_reliable += int(reliable.sum())
            n_seen += len(batch_t)
            step += 1

        metrics = evaluate(params, target, epoch=epoch + 1)
        record = EpochRecord(
            stage=2,
            epoch=epoch + 1,
            lr=lr,
            losses=_epoch_means(sums, steps_per_epoch),
            reliable_fraction=n_reliable / n_seen if n_seen else 0.0,
            margins=margins.values.tolist(),
            gaps=bank.gaps().tolist(),
            distances=bank.distance_matrix().tolist(),
            metrics=metrics,
        )
        history.append(record)
        logger.info(f"Stage 2 epoch {epoch + 1}/{config.epochs_stage2}: losses "
                    + ', '.join(f"{k} {v:.4g}" for k, v in record.losses.items())
                    + f"; reliable {record.reliable_fraction:.2f}; {metrics.summary_line()}")
    return params, bank, history


def train(config, specs, source, target):
    """
    Run both stages and score the final network on the target set

    Returns:
        TrainResult: Final params, bank, full history and target metrics
    """
    logger.info(f"Training with seed {config.seed}: {config.epochs_stage1} + {config.epochs_stage2} epochs, "
                f"batch {config.batch_size}")
    params, history1 = pretrain_stage1(config, source, specs)
    params, bank, history2 = train_stage2(config, params, source, target)
    metrics = history2[-1].metrics
    logger.info(f"Final target metrics: {metrics.summary_line()}")
    return TrainResult(params=params, bank=bank, history=history1 + history2, metrics=metrics)
