import json

import numpy as np
import pytest
import torch

from metagin.data import (
    BUNDLE_FILES,
    DatasetBundle,
    generate_sbm,
    load_dataset,
    load_params,
    read_weak_labels,
    save_params,
    synthesize,
    write_bundle,
    write_train_log,
    write_weak_labels,
)
from metagin.errors import DataError, GraphError
from metagin.graph import build_graph
from metagin.models import TrainLogEntry
from metagin.noise import inject_split_noise
from metagin.numerics import init_params
from metagin.seeding import make_rng


def _ten_node_graph():
    rng = np.random.default_rng(0)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3, 4, 4])
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 9), (9, 0), (2, 7)]
    return build_graph(edges, rng.standard_normal((10, 3)), labels, ([0, 1, 2], [3], [4]))


def test_bundle_round_trip(tmp_path):
    g = _ten_node_graph()
    write_bundle(DatasetBundle.from_graph(g, 'ten'), tmp_path / 'ten')
    back = load_dataset(tmp_path / 'ten')
    assert back.num_nodes == 10
    assert (back.adjacency != g.adjacency).nnz == 0
    assert np.array_equal(back.features, g.features)
    assert np.array_equal(back.labels, g.labels)
    assert back.class_splits == g.class_splits
    meta = json.loads((tmp_path / 'ten' / 'metadata.json').read_text())
    assert meta['num_edges'] == 11
    assert meta['num_nodes'] == 10


def test_row_order_does_not_matter(tmp_path):
    g = _ten_node_graph()
    out = write_bundle(DatasetBundle.from_graph(g, 'ten'), tmp_path / 'ten')
    lines = (out / 'labels.csv').read_text().splitlines()
    (out / 'labels.csv').write_text('\n'.join([lines[0]] + lines[:0:-1]) + '\n')
    assert np.array_equal(load_dataset(out).labels, g.labels)


@pytest.mark.parametrize('field, value', [
    ('num_nodes', 11),
    ('num_edges', 1001),
    ('num_features', 99),
    ('num_classes', 7),
    ('checksum', '0' * 64),
])
def test_metadata_must_match_the_files(tmp_path, field, value):
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    meta = json.loads((out / 'metadata.json').read_text())
    meta[field] = value
    (out / 'metadata.json').write_text(json.dumps(meta))
    with pytest.raises(DataError, match=field):
        load_dataset(out)


def test_edited_values_fail_the_checksum(tmp_path):
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    lines = (out / 'labels.csv').read_text().splitlines()
    lines[1] = '0,1'
    (out / 'labels.csv').write_text('\n'.join(lines) + '\n')
    with pytest.raises(DataError, match='checksum'):
        load_dataset(out)


def test_non_numeric_cell_names_the_line(tmp_path):
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    lines = (out / 'features.csv').read_text().splitlines()
    cells = lines[2].split(',')
    cells[1] = 'abc'
    lines[2] = ','.join(cells)
    (out / 'features.csv').write_text('\n'.join(lines) + '\n')
    with pytest.raises(DataError, match='line 3'):
        load_dataset(out)


def test_malformed_edge_line(tmp_path):
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    with open(out / 'graph.edges', 'a') as fh:
        fh.write('4\tx\n')
    with pytest.raises(DataError, match='line 12'):
        load_dataset(out)


def test_overlapping_splits_are_rejected(tmp_path):
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    (out / 'splits.json').write_text(json.dumps({'train_classes': [0, 1, 2], 'val_classes': [2, 3],
                                                 'test_classes': [4]}))
    with pytest.raises(GraphError):
        load_dataset(out)


def test_missing_inputs(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / 'nowhere')
    out = write_bundle(DatasetBundle.from_graph(_ten_node_graph(), 'ten'), tmp_path / 'ten')
    (out / 'labels.csv').unlink()
    with pytest.raises(DataError, match='labels.csv'):
        load_dataset(out)


def test_sbm_extremes_give_cliques():
    bundle = generate_sbm(classes=3, nodes_per_class=4, p_in=1.0, p_out=0.0, d=2, split_counts=(1, 1, 1), seed=0)
    assert len(bundle.edges) == 3 * 6
    for u, v in bundle.edges:
        assert bundle.labels[u] == bundle.labels[v]


def test_sbm_bundles_are_byte_identical(tmp_path, small_spec):
    a = write_bundle(synthesize(small_spec), tmp_path / 'a')
    b = write_bundle(synthesize(small_spec), tmp_path / 'b')
    for name in BUNDLE_FILES + ('metadata.json',):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    other = write_bundle(synthesize(small_spec.model_copy(update={'seed': 2})), tmp_path / 'c')
    assert (a / 'features.csv').read_bytes() != (other / 'features.csv').read_bytes()


def test_separated_features_are_learnable():
    bundle = generate_sbm(classes=5, nodes_per_class=40, d=16, mean_separation=10.0, feature_std=1.0,
                          split_counts=(3, 1, 1), seed=6)
    fit = np.zeros(bundle.labels.size, dtype=bool)
    fit[::2] = True
    centroids = np.stack([bundle.features[fit & (bundle.labels == c)].mean(axis=0) for c in range(5)])
    held = bundle.features[~fit]
    distances = ((held[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    accuracy = (distances.argmin(axis=1) == bundle.labels[~fit]).mean()
    assert accuracy > 0.95


def test_class_means_share_a_low_rank_subspace():
    bundle = generate_sbm(classes=10, nodes_per_class=2, d=16, mean_separation=4.0, feature_std=0.0, seed=3)
    means = bundle.features[::2]
    assert np.linalg.matrix_rank(means, tol=1e-9) == 5
    np.testing.assert_allclose(means[1::2], -means[::2], atol=1e-12)
    distances = np.linalg.norm(means[:, None, :] - means[None], axis=-1)[~np.eye(10, dtype=bool)]
    assert np.all(np.isclose(distances, 4.0) | np.isclose(distances, 4.0 * np.sqrt(2.0)))


def test_params_round_trip(tmp_path):
    params = init_params(5, 3, 4, make_rng(2))
    path = save_params(params, tmp_path / 'out' / 'params.json', fingerprint='abc', propagation_hops=2)
    back, meta = load_params(path)
    assert all(torch.equal(x, y) for x, y in zip(params.tensors(), back.tensors()))
    assert meta == {'fingerprint': 'abc', 'propagation_hops': 2}


def test_params_errors(tmp_path):
    with pytest.raises(DataError):
        load_params(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        load_params(bad)


def test_weak_labels_round_trip(tmp_path, tiny_graph):
    weak = inject_split_noise(tiny_graph, 'symmetric', 0.4, seed=1)
    path = write_weak_labels(tiny_graph, weak, tmp_path / 'labels.csv')
    back = read_weak_labels(tiny_graph, path)
    assert np.array_equal(back.labels, weak.labels)
    assert np.array_equal(back.flip_mask, weak.flip_mask)


def test_weak_labels_must_keep_test_clean(tmp_path, tiny_graph):
    weak = inject_split_noise(tiny_graph, 'symmetric', 0.0, seed=1)
    path = write_weak_labels(tiny_graph, weak, tmp_path / 'labels.csv')
    lines = path.read_text().splitlines()
    node = int(tiny_graph.split_nodes('test')[0])
    other = next(c for c in tiny_graph.split_classes('test') if c != tiny_graph.labels[node])
    cells = lines[node + 1].split(',')
    cells[1] = str(other)
    lines[node + 1] = ','.join(cells)
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(DataError, match='test-split'):
        read_weak_labels(tiny_graph, path)


def test_train_log_csv(tmp_path):
    log = [TrainLogEntry(episode=0, train_loss=float('nan'), val_accuracy=0.5, val_clean_accuracy=0.4),
           TrainLogEntry(episode=10, train_loss=0.7, val_accuracy=0.6, val_clean_accuracy=0.55)]
    path = write_train_log(log, tmp_path / 'train_log.csv')
    lines = path.read_text().splitlines()
    assert lines[0] == 'episode,train_loss,val_accuracy,val_clean_accuracy'
    assert lines[2] == '10,0.7,0.6,0.55'
