import os

import pytest

from metagin.data import synthesize
from metagin.episodes import build_interpolation_groups, sample_task_set
from metagin.graph import propagated_features
from metagin.models import ExperimentConfig, MetaConfig, ModelConfig, SyntheticSpec
from metagin.noise import clean_labels
from metagin.numerics import init_params
from metagin.seeding import make_rng


def pytest_collection_modifyitems(config, items):
    if os.environ.get('METAGIN_RUN_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason='set METAGIN_RUN_SLOW=1 to run the benchmark tests')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_graph():
    # d = 6, three classes per split with 8 nodes each
    spec = SyntheticSpec(name='tiny', classes=9, nodes_per_class=8, p_in=0.5, p_out=0.05, dim=6,
                         separation=3.0, std=1.0, split_counts=(3, 3, 3), seed=3)
    return synthesize(spec).to_graph()


@pytest.fixture
def tiny_propagated(tiny_graph):
    return propagated_features(tiny_graph, 2)


@pytest.fixture
def tiny_params():
    # d = 6, d' = 4, N = 3
    return init_params(6, 4, 3, make_rng(11, 'init'))


@pytest.fixture
def tiny_episode(tiny_graph):
    # N = 3, K = 2, K' = 2, M = 3
    task_set = sample_task_set(tiny_graph, clean_labels(tiny_graph), 'train', 3, 2, 2, 3, rng_seed=5)
    return build_interpolation_groups(task_set)


@pytest.fixture
def small_spec():
    return SyntheticSpec(name='small', classes=6, nodes_per_class=12, p_in=0.3, p_out=0.02, dim=8,
                         separation=6.0, std=1.0, split_counts=(2, 2, 2), seed=1)


@pytest.fixture
def small_config(small_spec):
    return ExperimentConfig(
        name='small',
        synthetic=small_spec,
        noise_kind='symmetric',
        epsilon=0.2,
        model=ModelConfig(d_hidden=4),
        meta=MetaConfig(inner_lr=0.1, meta_lr=0.01, tasks_per_batch=2, max_episodes=3, val_interval=1,
                        val_tasks=2, patience=5, finetune_steps=2, n_way=2, k_shot=1, k_query=2, m_tasks=2),
        n_test_tasks=3,
        n_repetitions=2,
        master_seed=7,
        record_wall_time=False,
    )
