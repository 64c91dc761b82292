"""Label corruption: transition matrices and seeded label flipping within a split."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .graph import AttributedGraph
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

NoiseKind = Literal['symmetric', 'asymmetric']
_KIND_ALIASES = {'sym': 'symmetric', 'symm': 'symmetric', 'symmetric': 'symmetric',
                 'asym': 'asymmetric', 'asymm': 'asymmetric', 'asymmetric': 'asymmetric'}
NOISE_STREAM = 'label-noise'


def canonical_kind(kind: str) -> str:
    try:
        return _KIND_ALIASES[str(kind).lower()]
    except KeyError:
        raise ConfigError(f'unknown noise kind {kind!r}') from None


@dataclass(frozen=True, eq=False)
class CorruptionMatrix:
    kind: str
    epsilon: float
    entries: np.ndarray

    @property
    def P(self) -> int:
        return int(self.entries.shape[0])


@dataclass(frozen=True, eq=False)
class NoisyLabeling:
    corrupted_labels: np.ndarray
    flip_mask: np.ndarray
    seed: int


@dataclass(frozen=True, eq=False)
class FlipRates:
    matrix: np.ndarray
    empty_classes: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class WeakLabels:
    """Full-length label vector seen during meta-training (train/val corrupted, test clean)."""

    labels: np.ndarray
    flip_mask: np.ndarray
    kind: str
    epsilon: float
    per_split: Dict[str, NoisyLabeling] = field(default_factory=dict)

    @property
    def flip_fraction(self) -> float:
        return float(self.flip_mask.mean()) if self.flip_mask.size else 0.0


def build_corruption_matrix(kind: str, P: int, epsilon: float) -> CorruptionMatrix:
    kind = canonical_kind(kind)
    if P < 2:
        raise ConfigError(f'corruption needs at least 2 classes, got {P}')
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f'epsilon must lie in [0, 1], got {epsilon}')
    if kind == 'symmetric':
        entries = np.full((P, P), epsilon / (P - 1))
        np.fill_diagonal(entries, 1.0 - epsilon)
    else:
        entries = np.eye(P) * (1.0 - epsilon)
        # cyclic pairing: class i flips to class (i + 1) mod P
        entries[np.arange(P), (np.arange(P) + 1) % P] = epsilon
    entries.setflags(write=False)
    return CorruptionMatrix(kind=kind, epsilon=float(epsilon), entries=entries)


def _positions(labels: np.ndarray, split_classes: Sequence[int]) -> np.ndarray:
    classes = np.asarray(split_classes, dtype=np.int64)
    order = np.argsort(classes)
    idx = np.searchsorted(classes[order], labels)
    idx = np.clip(idx, 0, len(classes) - 1)
    found = classes[order][idx] == labels
    if not np.all(found):
        bad = labels[~found][0]
        raise DataError(f'label {bad} is not in the split classes {list(split_classes)}')
    return order[idx]


def apply_noise(labels, split_classes: Sequence[int], matrix: CorruptionMatrix, seed: int) -> NoisyLabeling:
    """Draw each label independently from the matrix row of its true class."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(split_classes, dtype=np.int64)
    if matrix.P != len(classes):
        raise ConfigError(f'matrix has P={matrix.P} but the split lists {len(classes)} classes')
    if labels.size == 0:
        return NoisyLabeling(labels.copy(), np.zeros(0, dtype=bool), seed)
    rows = _positions(labels, classes)
    cdf = np.cumsum(matrix.entries, axis=1)
    cdf[:, -1] = 1.0
    u = make_rng(seed, NOISE_STREAM).random(labels.size)
    drawn = (cdf[rows] <= u[:, None]).sum(axis=1)
    corrupted = classes[drawn]
    return NoisyLabeling(corrupted_labels=corrupted, flip_mask=corrupted != labels, seed=seed)


def empirical_flip_rates(original, corrupted, split_classes: Sequence[int]) -> FlipRates:
    original = np.asarray(original, dtype=np.int64)
    corrupted = np.asarray(corrupted, dtype=np.int64)
    if original.shape != corrupted.shape:
        raise DataError('original and corrupted label vectors differ in length')
    P = len(split_classes)
    counts = np.zeros((P, P))
    if original.size:
        np.add.at(counts, (_positions(original, split_classes), _positions(corrupted, split_classes)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    empty = tuple(int(split_classes[i]) for i in np.flatnonzero(totals.ravel() == 0))
    return FlipRates(matrix=rates, empty_classes=empty)


def inject_split_noise(graph: AttributedGraph, kind: str, epsilon: float, seed: int) -> WeakLabels:
    """Corrupt train and validation labels within their own class sets; test stays clean."""
    kind = canonical_kind(kind)
    labels = np.array(graph.labels, dtype=np.int64)
    flips = np.zeros(graph.num_nodes, dtype=bool)
    per_split = {}
    for split in ('train', 'val'):
        classes = graph.split_classes(split)
        nodes = graph.split_nodes(split)
        if len(classes) < 2:
            if epsilon > 0 and nodes.size:
                raise ConfigError(f'split {split!r} has {len(classes)} class(es); cannot corrupt with epsilon={epsilon}')
            continue
        matrix = build_corruption_matrix(kind, len(classes), epsilon)
        noisy = apply_noise(graph.labels[nodes], classes, matrix, derive_seed(seed, split))
        labels[nodes] = noisy.corrupted_labels
        flips[nodes] = noisy.flip_mask
        per_split[split] = noisy
        logger.info('split=%s kind=%s epsilon=%.3f flipped=%d/%d', split, kind, epsilon,
                    int(noisy.flip_mask.sum()), nodes.size)
    labels.setflags(write=False)
    return WeakLabels(labels=labels, flip_mask=flips, kind=kind, epsilon=float(epsilon), per_split=per_split)


def clean_labels(graph: AttributedGraph) -> WeakLabels:
    return WeakLabels(labels=graph.labels, flip_mask=np.zeros(graph.num_nodes, dtype=bool),
                      kind='symmetric', epsilon=0.0)
