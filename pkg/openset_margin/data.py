"""
Data for OpenSetMargin - Open-set domain pair generation and dataset I/O module.
Builds shifted source/target Gaussian-blob domains with target-only unknown classes, and reads/writes them as CSV.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np

from openset_margin.errors import ConfigValidationError, DataParseError, DataSchemaError, GenerationError

logger = logging.getLogger('OpenSetMargin.Data')

SOURCE = 'source'
TARGET = 'target'
DOMAINS = (SOURCE, TARGET)
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    domain: str


@dataclass
class Dataset:
    """Feature matrix with raw integer labels from one domain"""

    features: np.ndarray
    labels: np.ndarray
    domain: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataSchemaError(f"features must be a 2-D matrix, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataSchemaError(f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.domain not in DOMAINS:
            raise DataSchemaError(f"unknown domain '{self.domain}'")

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        return LabeledSample(self.features[i], int(self.labels[i]), self.domain)

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.domain == other.domain
                and np.array_equal(self.labels, other.labels)
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticConfig:
    """Geometry of a synthetic open-set domain pair"""

    n_known: int = 4
    n_unknown_subclasses: int = 2
    dim: int = 8
    samples_per_class: int = 200
    shift_rotation: float = 0.5
    shift_translation: Tuple[float, ...] = field(default_factory=tuple)
    noise_sigma: float = 1.0
    unknown_ratio: float = 0.5
    seed: int = 0
    class_spread: float = 4.0
    unknown_spread: float = 6.0
    guard_factor: float = 3.0

    def __post_init__(self):
        if self.n_known < 2:
            raise ConfigValidationError(f"n_known must be >= 2, got {self.n_known}", field='n_known')
        if self.n_unknown_subclasses < 1:
            raise ConfigValidationError(f"n_unknown_subclasses must be >= 1, got {self.n_unknown_subclasses}",
                                        field='n_unknown_subclasses')
        if self.dim < 2:
            raise ConfigValidationError(f"dim must be >= 2, got {self.dim}", field='dim')
        if self.samples_per_class < 1:
            raise ConfigValidationError(f"samples_per_class must be positive, got {self.samples_per_class}",
                                        field='samples_per_class')
        if not 0.0 < self.unknown_ratio < 1.0:
            raise ConfigValidationError(f"unknown_ratio must lie in (0, 1), got {self.unknown_ratio}",
                                        field='unknown_ratio')
        if not self.noise_sigma >= 0.0:
            raise ConfigValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}", field='noise_sigma')
        if len(self.shift_translation) not in (0, self.dim):
            raise ConfigValidationError(
                f"shift_translation needs {self.dim} entries (or none), got {len(self.shift_translation)}",
                field='shift_translation')
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}", field='seed')
        object.__setattr__(self, 'shift_translation', tuple(float(v) for v in self.shift_translation))

    @property
    def translation(self):
        if not self.shift_translation:
            return np.zeros(self.dim)
        return np.asarray(self.shift_translation, dtype=np.float64)


def eval_label(raw_label, n_known):
    """Collapse a raw label onto {0..N}, N meaning unknown"""
    return raw_label if raw_label < n_known else n_known


def eval_labels(raw_labels, n_known):
    return np.minimum(np.asarray(raw_labels, dtype=np.int64), n_known)


def known_means(config):
    """Class means of the source domain"""
    n, d = config.n_known, config.dim
    means = np.zeros((n, d))
    if d >= n:
        means[np.arange(n), np.arange(n)] = config.class_spread
    else:
        angles = 2.0 * math.pi * np.arange(n) / n
        means[:, 0] = config.class_spread * np.cos(angles)
        means[:, 1] = config.class_spread * np.sin(angles)
    return means


def apply_shift(points, config):
    """Rotate the first two dimensions, then translate"""
    c, s = math.cos(config.shift_rotation), math.sin(config.shift_rotation)
    shifted = np.array(points, dtype=np.float64, copy=True)
    x0, x1 = shifted[:, 0].copy(), shifted[:, 1].copy()
    shifted[:, 0] = c * x0 - s * x1
    shifted[:, 1] = s * x0 + c * x1
    return shifted + config.translation


def unknown_count(config):
    known = config.n_known * config.samples_per_class
    return int(round(known * config.unknown_ratio / (1.0 - config.unknown_ratio)))


def _place_unknown_means(config, target_known_means, rng):
    guard = config.guard_factor * config.noise_sigma
    means = []
    for k in range(config.n_unknown_subclasses):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = rng.uniform(-config.unknown_spread, config.unknown_spread, size=config.dim)
            if np.all(np.linalg.norm(target_known_means - candidate, axis=1) >= guard):
                means.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place unknown blob {k} outside guard radius {guard:.3g} after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts; the configuration is too crowded")
    return np.stack(means)


def generate_pair(config):
    """
    Generate a source/target open-set pair

    Args:
        config (SyntheticConfig): Domain geometry and seed

    Returns:
        tuple: (source Dataset, target Dataset)
    """
    rng = np.random.default_rng(config.seed)
    n, d, per_class = config.n_known, config.dim, config.samples_per_class
    means = known_means(config)

    src_labels = np.repeat(np.arange(n), per_class)
    src_features = means[src_labels] + config.noise_sigma * rng.standard_normal((n * per_class, d))

    tgt_known = means[src_labels] + config.noise_sigma * rng.standard_normal((n * per_class, d))
    tgt_known = apply_shift(tgt_known, config)

    shifted_means = apply_shift(means, config)
    unk_means = _place_unknown_means(config, shifted_means, rng)
    n_unknown = unknown_count(config)
    per_sub = np.full(config.n_unknown_subclasses, n_unknown // config.n_unknown_subclasses)
    per_sub[:n_unknown % config.n_unknown_subclasses] += 1
    unk_sub = np.repeat(np.arange(config.n_unknown_subclasses), per_sub)
    unk_features = unk_means[unk_sub] + config.noise_sigma * rng.standard_normal((n_unknown, d))

    tgt_features = np.vstack([tgt_known, unk_features])
    tgt_labels = np.concatenate([src_labels, n + unk_sub])

    src_order = rng.permutation(len(src_labels))
    tgt_order = rng.permutation(len(tgt_labels))
    source = Dataset(src_features[src_order], src_labels[src_order], SOURCE)
    target = Dataset(tgt_features[tgt_order], tgt_labels[tgt_order], TARGET)
    logger.info(f"Generated pair: {len(source)} source samples, {len(target)} target samples "
                f"({n_unknown} unknown) in {d} dimensions")
    return source, target


def save_csv(dataset, path):
    """Write a dataset with header domain,label,f0..f{d-1}"""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['domain', 'label'] + [f"f{j}" for j in range(dataset.dim)])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([dataset.domain, int(label)] + ['%.17g' % v for v in row])
    logger.debug(f"Wrote {len(dataset)} rows to {path}")


def load_csv(path):
    """Read a dataset written by save_csv"""
    with open(path, 'r', encoding='utf-8', newline='') as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataSchemaError(f"{path} is empty; expected a header row")
    header = rows[0]
    if header[:2] != ['domain', 'label'] or header[2:] != [f"f{j}" for j in range(len(header) - 2)]:
        raise DataSchemaError(f"{path}: bad header {header}")
    dim = len(header) - 2
    if dim < 1:
        raise DataSchemaError(f"{path}: header declares no feature columns")
    if len(rows) == 1:
        raise DataSchemaError(f"{path} has a header but no samples")

    domain = None
    labels: List[int] = []
    features: List[List[float]] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 2:
            raise DataSchemaError(f"{path} line {line_no}: expected {dim + 2} fields, got {len(row)}")
        if domain is None:
            domain = row[0]
        if row[0] != domain:
            raise DataSchemaError(f"{path} line {line_no}: mixed domains '{domain}' and '{row[0]}'")
        if row[0] not in DOMAINS:
            raise DataParseError(f"unknown domain '{row[0]}'", line=line_no)
        try:
            labels.append(int(row[1]))
            values = [float(v) for v in row[2:]]
        except ValueError as e:
            raise DataParseError(f"{path}: {e}", line=line_no) from e
        if labels[-1] < 0:
            raise DataParseError(f"{path}: negative label {labels[-1]}", line=line_no)
        if not all(math.isfinite(v) for v in values):
            raise DataParseError(f"{path}: non-finite feature value", line=line_no)
        features.append(values)
    return Dataset(np.array(features), np.array(labels), domain)


def batch_iter(dataset, batch_size, seed, epoch):
    """
    Shuffled index batches for one epoch over a Dataset (or a plain sample count)

    The permutation depends only on (seed, epoch). A trailing batch of one sample is dropped
    because batch normalization cannot train on it.
    """
    if batch_size < 2:
        raise ConfigValidationError(f"batch_size must be >= 2 for batch normalization, got {batch_size}",
                                    field='batch_size')
    n_samples = int(dataset) if isinstance(dataset, (int, np.integer)) else len(dataset)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n_samples)
    batches = [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches
