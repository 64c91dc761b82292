"""Dataset bundles on disk, the synthetic SBM benchmark, and parameter checkpoints.

Bundle layout (one directory):
    graph.edges    src<TAB>dst per line, 0-based, undirected
    features.csv   node_id,f0,...,f{d-1}
    labels.csv     node_id,class_id
    splits.json    {"train_classes": [...], "val_classes": [...], "test_classes": [...]}
    metadata.json  name, counts, sha256 checksum of the canonical text of the four files above
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
import torch

from .errors import DataError
from .graph import AttributedGraph, ClassSplits, build_graph
from .models import SyntheticSpec, TrainLogEntry
from .noise import WeakLabels
from .numerics import PARAM_NAMES, ParamSet
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

BUNDLE_FILES = ('graph.edges', 'features.csv', 'labels.csv', 'splits.json')
PARAMS_FORMAT = 'metagin-params/1'


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    name: str
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    splits: ClassSplits

    def to_graph(self) -> AttributedGraph:
        return build_graph(self.edges, self.features, self.labels, self.splits)

    @classmethod
    def from_graph(cls, graph: AttributedGraph, name: str) -> 'DatasetBundle':
        return cls(name, graph.edge_list(), np.asarray(graph.features), np.asarray(graph.labels), graph.class_splits)


def _float_text(x: float) -> str:
    return repr(float(x))


def _file_texts(bundle: DatasetBundle) -> Dict[str, str]:
    edges = np.asarray(bundle.edges, dtype=np.int64).reshape(-1, 2)
    lo, hi = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    pairs = sorted(set(zip(lo[keep].tolist(), hi[keep].tolist())))
    d = bundle.features.shape[1]
    header = ','.join(['node_id'] + [f'f{j}' for j in range(d)])
    feature_lines = [header] + [
        ','.join([str(i)] + [_float_text(v) for v in row]) for i, row in enumerate(bundle.features)
    ]
    label_lines = ['node_id,class_id'] + [f'{i},{int(c)}' for i, c in enumerate(bundle.labels)]
    return {
        'graph.edges': ''.join(f'{u}\t{v}\n' for u, v in pairs),
        'features.csv': '\n'.join(feature_lines) + '\n',
        'labels.csv': '\n'.join(label_lines) + '\n',
        'splits.json': json.dumps(bundle.splits.to_json(), indent=2, sort_keys=True) + '\n',
    }


def write_bundle(bundle: DatasetBundle, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    texts = _file_texts(bundle)
    for name in BUNDLE_FILES:
        (out / name).write_bytes(texts[name].encode('utf-8'))
    metadata = {
        'name': bundle.name,
        'num_nodes': int(bundle.labels.size),
        'num_edges': texts['graph.edges'].count('\n'),
        'num_features': int(bundle.features.shape[1]),
        'num_classes': int(len(np.unique(bundle.labels))),
        'checksum': _content_checksum(texts),
    }
    (out / 'metadata.json').write_text(json.dumps(metadata, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return out


def _require(directory: Path, name: str) -> Path:
    path = directory / name
    if not path.is_file():
        raise DataError(f'missing bundle file {path}')
    return path


def _read_edges(path: Path) -> np.ndarray:
    pairs = []
    with open(path, encoding='utf-8') as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split('\t') if '\t' in line else line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f'{path.name}: malformed edge on line {lineno}: {line!r}') from None
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _read_table(path: Path, integer: bool) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f'{path.name}: {exc}') from exc
    if 'node_id' not in frame.columns:
        raise DataError(f'{path.name}: header must start with node_id')
    parsed = {}
    for column in frame.columns:
        values = frame[column].map(_to_float).astype(np.float64)
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan))
        if column == 'node_id' or integer:
            bad |= values.notna() & (values % 1 != 0)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            # line 1 is the header
            raise DataError(f'{path.name}: malformed value {frame[column].iloc[row]!r} '
                            f'in column {column!r} on line {row + 2}')
        parsed[column] = values
    out = pd.DataFrame(parsed)
    if integer:
        out = out.astype(np.int64)
    else:
        out['node_id'] = out['node_id'].astype(np.int64)
    return out


def _by_node(frame: pd.DataFrame, path: Path, num_nodes: Optional[int] = None) -> pd.DataFrame:
    frame = frame.sort_values('node_id', kind='stable').reset_index(drop=True)
    ids = frame['node_id'].to_numpy()
    n = num_nodes if num_nodes is not None else len(ids)
    if len(ids) != n or not np.array_equal(ids, np.arange(n)):
        raise DataError(f'{path.name}: node ids must be exactly 0..{n - 1}, one row each')
    return frame


def load_dataset(directory) -> AttributedGraph:
    """Read and validate a bundle directory; row order inside files does not matter."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f'dataset directory {directory} does not exist')
    features_path = _require(directory, 'features.csv')
    labels_path = _require(directory, 'labels.csv')
    splits_path = _require(directory, 'splits.json')
    edges_path = _require(directory, 'graph.edges')

    features = _by_node(_read_table(features_path, integer=False), features_path)
    labels = _by_node(_read_table(labels_path, integer=True), labels_path, num_nodes=len(features))
    if 'class_id' not in labels.columns:
        raise DataError(f'{labels_path.name}: missing class_id column')
    try:
        splits = json.loads(splits_path.read_text(encoding='utf-8'))
        class_splits = ClassSplits.from_any({k: splits[f'{k}_classes'] for k in ('train', 'val', 'test')})
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f'{splits_path.name}: {exc}') from exc

    graph = build_graph(
        _read_edges(edges_path),
        features.drop(columns=['node_id']).to_numpy(dtype=np.float64),
        labels['class_id'].to_numpy(dtype=np.int64),
        class_splits,
    )
    meta_path = directory / 'metadata.json'
    if meta_path.is_file():
        _check_metadata(meta_path, graph)
    logger.info('loaded dataset=%s nodes=%d edges=%d features=%d', directory.name, graph.num_nodes,
                graph.num_edges, graph.num_features)
    return graph


def _content_checksum(texts: Dict[str, str]) -> str:
    digest = hashlib.sha256()
    for name in BUNDLE_FILES:
        digest.update(texts[name].encode('utf-8'))
    return digest.hexdigest()


def _check_metadata(meta_path: Path, graph: AttributedGraph):
    """Every count or checksum present in metadata.json must match the loaded files."""
    try:
        meta = json.loads(meta_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise DataError(f'{meta_path.name}: {exc}') from exc
    actual = {
        'num_nodes': graph.num_nodes,
        'num_edges': graph.num_edges,
        'num_features': graph.num_features,
        'num_classes': int(np.unique(graph.labels).size),
    }
    for key, value in actual.items():
        if key not in meta:
            continue
        try:
            listed = int(meta[key])
        except (TypeError, ValueError):
            raise DataError(f'{meta_path.name}: {key} must be an integer, got {meta[key]!r}') from None
        if listed != value:
            raise DataError(f'{meta_path.name}: {key} is {listed}, files hold {value}')
    if 'checksum' in meta:
        canonical = _file_texts(DatasetBundle.from_graph(graph, meta.get('name', '')))
        if meta['checksum'] != _content_checksum(canonical):
            raise DataError(f'{meta_path.name}: checksum does not match the bundle files')


def _class_means(rng: np.random.Generator, classes: int, dim: int, separation: float) -> np.ndarray:
    """Class means on a cross-polytope in a shared rank ceil(classes / 2) subspace.

    Class c sits at +/- axis c // 2, so held-out classes reuse the directions
    the training classes span. Means are `separation` apart, antipodal pairs
    sqrt(2) * `separation`.
    """
    rank = (classes + 1) // 2
    if rank <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
        signs = np.where(np.arange(classes) % 2 == 0, 1.0, -1.0)
        directions = q.T[np.arange(classes) // 2] * signs[:, None]
    else:
        directions = rng.standard_normal((classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (separation / np.sqrt(2.0))


def generate_sbm(classes: int = 10, nodes_per_class: int = 60, p_in: float = 0.1, p_out: float = 0.01,
                 d: int = 16, mean_separation: float = 4.0, feature_std: float = 1.0,
                 split_counts: Sequence[int] = (6, 2, 2), seed: int = 0, name: str = 'sbm') -> DatasetBundle:
    """Stochastic block model with Gaussian class-conditional features."""
    spec = SyntheticSpec(name=name, classes=classes, nodes_per_class=nodes_per_class, p_in=p_in, p_out=p_out,
                         dim=d, separation=mean_separation, std=feature_std,
                         split_counts=tuple(split_counts), seed=seed)
    return synthesize(spec)


def synthesize(spec: SyntheticSpec) -> DatasetBundle:
    sizes = [spec.nodes_per_class] * spec.classes
    probs = [[spec.p_in if i == j else spec.p_out for j in range(spec.classes)] for i in range(spec.classes)]
    sbm = nx.stochastic_block_model(sizes, probs, seed=derive_seed(spec.seed, 'edges') % (2 ** 32))
    edges = np.asarray(sorted(sbm.edges()), dtype=np.int64).reshape(-1, 2)

    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.nodes_per_class)
    means = _class_means(make_rng(spec.seed, 'class-means'), spec.classes, spec.dim, spec.separation)
    noise = make_rng(spec.seed, 'features').standard_normal((labels.size, spec.dim)) * spec.std
    features = means[labels] + noise

    order = make_rng(spec.seed, 'splits').permutation(spec.classes)
    a, b, _ = spec.split_counts
    splits = ClassSplits.from_any([order[:a], order[a:a + b], order[a + b:]])
    return DatasetBundle(spec.name, edges, features, labels, splits)


def save_params(params: ParamSet, path, **metadata) -> Path:
    """params.json: named arrays with explicit shapes, values as round-trip decimal strings."""
    doc = {
        'format': PARAMS_FORMAT,
        'metadata': metadata,
        'tensors': {
            name: {'shape': list(t.shape), 'values': [_float_text(v) for v in t.detach().reshape(-1).tolist()]}
            for name, t in params.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def load_params(path) -> Tuple[ParamSet, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f'missing checkpoint {path}')
    try:
        doc = json.loads(path.read_text(encoding='utf-8'))
        if doc.get('format') != PARAMS_FORMAT:
            raise DataError(f'{path.name}: unknown checkpoint format {doc.get("format")!r}')
        tensors = []
        for name in PARAM_NAMES:
            entry = doc['tensors'][name]
            values = torch.tensor([float(v) for v in entry['values']], dtype=torch.float64)
            tensors.append(values.reshape(entry['shape']))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise DataError(f'{path.name}: malformed checkpoint ({exc})') from exc
    return ParamSet.from_tensors(tensors), doc.get('metadata', {})


def write_weak_labels(graph: AttributedGraph, weak: WeakLabels, path) -> Path:
    frame = pd.DataFrame({
        'node_id': np.arange(graph.num_nodes),
        'class_id': np.asarray(weak.labels),
        'original_class_id': np.asarray(graph.labels),
        'flipped': np.asarray(weak.flip_mask).astype(int),
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def read_weak_labels(graph: AttributedGraph, path) -> WeakLabels:
    path = Path(path)
    if not path.is_file():
        raise DataError(f'missing label file {path}')
    frame = _by_node(_read_table(path, integer=True), path, num_nodes=graph.num_nodes)
    labels = frame['class_id'].to_numpy(dtype=np.int64)
    flips = labels != np.asarray(graph.labels)
    test = graph.split_nodes('test')
    if flips[test].any():
        raise DataError(f'{path.name}: test-split labels must stay clean')
    labels.setflags(write=False)
    return WeakLabels(labels=labels, flip_mask=flips, kind='symmetric', epsilon=float('nan'))


def write_train_log(log: Iterable[TrainLogEntry], path) -> Path:
    columns = ['episode', 'train_loss', 'val_accuracy', 'val_clean_accuracy']
    frame = pd.DataFrame([entry.model_dump() for entry in log], columns=columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n')
    return path
