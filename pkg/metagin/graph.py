"""Attributed graphs and SGC feature propagation."""
import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')


@dataclass(frozen=True)
class ClassSplits:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]

    @classmethod
    def from_any(cls, splits) -> 'ClassSplits':
        if isinstance(splits, ClassSplits):
            return splits
        if isinstance(splits, dict):
            parts = [splits.get(k, splits.get(f'{k}_classes', ())) for k in SPLITS]
        else:
            parts = list(splits)
            if len(parts) != 3:
                raise GraphError('expected three class splits (train, val, test)')
        return cls(*(tuple(sorted(int(c) for c in p)) for p in parts))

    def get(self, split: str) -> Tuple[int, ...]:
        if split == 'validation':
            split = 'val'
        if split not in SPLITS:
            raise GraphError(f'unknown split {split!r}')
        return getattr(self, split)

    def to_json(self) -> Dict[str, list]:
        return {f'{k}_classes': list(getattr(self, k)) for k in SPLITS}


# eq=False keeps identity hashing, which the propagation cache relies on
@dataclass(frozen=True, eq=False)
class AttributedGraph:
    num_nodes: int
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    class_splits: ClassSplits
    stripped_self_loops: int = 0

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def split_classes(self, split: str) -> Tuple[int, ...]:
        return self.class_splits.get(split)

    def split_nodes(self, split: str) -> np.ndarray:
        classes = np.asarray(self.split_classes(split), dtype=np.int64)
        return np.flatnonzero(np.isin(self.labels, classes))

    def edge_list(self) -> np.ndarray:
        upper = sp.triu(self.adjacency, k=1).tocoo()
        edges = np.stack([upper.row, upper.col], axis=1).astype(np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return edges[order]


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: sp.csr_matrix


@dataclass(frozen=True, eq=False)
class PropagatedFeatures:
    matrix: np.ndarray
    hop_count: int

    @functools.cached_property
    def tensor(self):
        import torch
        return torch.from_numpy(np.array(self.matrix, dtype=np.float64))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def build_graph(edges: Iterable[Sequence[int]], features, labels, splits) -> AttributedGraph:
    """Validate inputs and build a symmetric, deduplicated graph.

    Self-loops in `edges` are stripped; the count is kept on the graph and logged.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise GraphError('labels must be a vector')
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise GraphError('labels must be integer class ids')
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise GraphError('labels must be non-negative class ids')
    num_nodes = int(labels.size)

    features = np.array(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise GraphError(f'feature rows ({features.shape[0] if features.ndim else 0}) '
                         f'must equal label count ({num_nodes})')
    if not np.all(np.isfinite(features)):
        raise GraphError('features contain non-finite values')

    class_splits = ClassSplits.from_any(splits)
    seen = set()
    for name in SPLITS:
        part = set(class_splits.get(name))
        overlap = seen & part
        if overlap:
            raise GraphError(f'split sets overlap on classes {sorted(overlap)}')
        seen |= part
    present = set(np.unique(labels).tolist())
    missing = present - seen
    if missing:
        raise GraphError(f'label ids {sorted(missing)} are not in any split')
    empty = seen - present
    if empty:
        raise GraphError(f'split classes {sorted(empty)} have no nodes')

    edge_arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    edge_arr = edge_arr.reshape(-1, 2)
    if edge_arr.size and (edge_arr.min() < 0 or edge_arr.max() >= num_nodes):
        bad = edge_arr[(edge_arr < 0).any(axis=1) | (edge_arr >= num_nodes).any(axis=1)][0]
        raise GraphError(f'edge ({bad[0]}, {bad[1]}) references a node outside [0, {num_nodes})')
    loops = edge_arr[:, 0] == edge_arr[:, 1]
    n_loops = int(loops.sum())
    if n_loops:
        logger.warning('stripped_self_loops=%d', n_loops)
        edge_arr = edge_arr[~loops]

    rows = np.concatenate([edge_arr[:, 0], edge_arr[:, 1]])
    cols = np.concatenate([edge_arr[:, 1], edge_arr[:, 0]])
    adjacency = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(num_nodes, num_nodes))
    adjacency.sum_duplicates()
    adjacency.data[:] = 1.0
    adjacency.sort_indices()

    return AttributedGraph(
        num_nodes=num_nodes,
        adjacency=adjacency,
        features=_readonly(features),
        labels=_readonly(labels),
        class_splits=class_splits,
        stripped_self_loops=n_loops,
    )


def normalize_adjacency(graph: AttributedGraph) -> NormalizedAdjacency:
    """S = D^-1/2 (A + I) D^-1/2, with D the degree matrix of A + I."""
    looped = graph.adjacency + sp.identity(graph.num_nodes, format='csr')
    degree = np.asarray(looped.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    matrix = (inv_sqrt @ looped @ inv_sqrt).tocsr()
    matrix.sort_indices()
    return NormalizedAdjacency(matrix=matrix)


def propagate(features, adjacency: NormalizedAdjacency, k: int) -> PropagatedFeatures:
    features = np.asarray(features, dtype=np.float64)
    if k < 0:
        raise ShapeError('hop count must be >= 0')
    if features.ndim != 2 or adjacency.matrix.shape[1] != features.shape[0]:
        raise ShapeError(f'adjacency {adjacency.matrix.shape} does not match features {features.shape}')
    out = features.copy()
    for _ in range(int(k)):
        out = np.asarray(adjacency.matrix @ out)
    return PropagatedFeatures(matrix=_readonly(out), hop_count=int(k))


@functools.lru_cache(maxsize=32)
def propagated_features(graph: AttributedGraph, hops: int) -> PropagatedFeatures:
    return propagate(graph.features, normalize_adjacency(graph), hops)
