"""N-way K-shot task sampling and cross-task interpolation groups."""
from dataclasses import dataclass
from functools import cached_property
from typing import List, Literal, Sequence, Tuple

import numpy as np

from .errors import SamplingError, ShapeError
from .graph import AttributedGraph
from .noise import WeakLabels
from .seeding import make_rng

SlotRole = Literal['support', 'query']


@dataclass(frozen=True, eq=False)
class FewShotTask:
    """Nodes are ordered class-major: K (or K') consecutive entries per class in class_list order."""

    support_nodes: np.ndarray
    support_labels: np.ndarray
    query_nodes: np.ndarray
    query_labels: np.ndarray
    class_list: Tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.class_list)

    @property
    def support(self) -> List[Tuple[int, int]]:
        return list(zip(self.support_nodes.tolist(), self.support_labels.tolist()))

    @property
    def query(self) -> List[Tuple[int, int]]:
        return list(zip(self.query_nodes.tolist(), self.query_labels.tolist()))

    def positions(self, labels: np.ndarray) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_list)}
        return np.array([lookup[int(c)] for c in labels], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TaskSet:
    tasks: Tuple[FewShotTask, ...]
    class_list: Tuple[int, ...]

    @property
    def m_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True, eq=False)
class InterpolationGroup:
    member_nodes: Tuple[int, ...]
    shared_label: int
    slot_role: str


@dataclass(frozen=True, eq=False)
class InterpolatedEpisode:
    support_groups: Tuple[InterpolationGroup, ...]
    query_groups: Tuple[InterpolationGroup, ...]
    class_list: Tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.class_list)

    @property
    def m_tasks(self) -> int:
        return len(self.support_groups[0].member_nodes) if self.support_groups else 0

    def groups(self, subset: str) -> Tuple[InterpolationGroup, ...]:
        if subset == 'support':
            return self.support_groups
        if subset == 'query':
            return self.query_groups
        raise ShapeError(f'unknown subset {subset!r}')

    @cached_property
    def _arrays(self):
        lookup = {c: i for i, c in enumerate(self.class_list)}
        out = {}
        for subset in ('support', 'query'):
            groups = self.groups(subset)
            out[subset] = (
                np.array([g.member_nodes for g in groups], dtype=np.int64).reshape(len(groups), -1),
                np.array([lookup[g.shared_label] for g in groups], dtype=np.int64),
            )
        return out

    def node_matrix(self, subset: str) -> np.ndarray:
        """(groups, M) node ids."""
        self.groups(subset)
        return self._arrays[subset][0]

    def targets(self, subset: str) -> np.ndarray:
        """Class position of each group's shared label."""
        self.groups(subset)
        return self._arrays[subset][1]


def _check_shape(n_way: int, k_shot: int, k_query: int, m_tasks: int = 1):
    if n_way < 1 or k_shot < 1 or k_query < 1 or m_tasks < 1:
        raise SamplingError(f'invalid episode shape N={n_way} K={k_shot} Kq={k_query} M={m_tasks}')


def _class_pools(labels: np.ndarray, nodes: np.ndarray, classes: Sequence[int]) -> dict:
    node_labels = labels[nodes]
    return {int(c): np.sort(nodes[node_labels == c]) for c in classes}


def _choose_classes(split_classes: Sequence[int], pools: dict, n_way: int, need: int, seed: int,
                    split: str) -> Tuple[int, ...]:
    if len(split_classes) < n_way:
        raise SamplingError(f'split {split!r} has {len(split_classes)} classes, need {n_way}')
    chosen = make_rng(seed, 'classes').choice(np.asarray(split_classes, dtype=np.int64), size=n_way, replace=False)
    for c in chosen:
        if pools[int(c)].size < need:
            raise SamplingError(f'class {int(c)} has {pools[int(c)].size} nodes in split {split!r}, need {need}')
    return tuple(int(c) for c in chosen)


def _task_from_draws(draws: List[np.ndarray], class_list: Tuple[int, ...], labels: np.ndarray,
                     k_shot: int) -> FewShotTask:
    support = np.concatenate([d[:k_shot] for d in draws])
    query = np.concatenate([d[k_shot:] for d in draws])
    return FewShotTask(
        support_nodes=support,
        support_labels=labels[support],
        query_nodes=query,
        query_labels=labels[query],
        class_list=class_list,
    )


def sample_task_set(graph: AttributedGraph, noisy_labeling: WeakLabels, split: str, n_way: int,
                    k_shot: int, k_query: int, m_tasks: int, rng_seed: int) -> TaskSet:
    """M tasks over one shared class list, drawn from the weak labels of `split`.

    Per class, tasks take disjoint chunks of a seeded permutation of the class
    pool while it lasts; later tasks draw K + K' distinct nodes from the whole
    pool (nodes may then repeat across tasks, never within one).
    """
    _check_shape(n_way, k_shot, k_query, m_tasks)
    labels = np.asarray(noisy_labeling.labels, dtype=np.int64)
    split_classes = graph.split_classes(split)
    pools = _class_pools(labels, graph.split_nodes(split), split_classes)
    need = k_shot + k_query
    class_list = _choose_classes(split_classes, pools, n_way, need, rng_seed, split)

    node_rng = make_rng(rng_seed, 'nodes')
    fallback_rng = make_rng(rng_seed, 'fallback')
    per_class_draws = []
    for c in class_list:
        pool = pools[c]
        perm = node_rng.permutation(pool)
        disjoint = perm.size // need
        draws = []
        for t in range(m_tasks):
            if t < disjoint:
                draws.append(perm[t * need:(t + 1) * need])
            else:
                draws.append(fallback_rng.choice(pool, size=need, replace=False))
        per_class_draws.append(draws)

    tasks = tuple(
        _task_from_draws([per_class_draws[i][t] for i in range(n_way)], class_list, labels, k_shot)
        for t in range(m_tasks)
    )
    return TaskSet(tasks=tasks, class_list=class_list)


def build_interpolation_groups(task_set: TaskSet) -> InterpolatedEpisode:
    """Group k holds slot k of every task; slots align by (class position, within-class index)."""
    tasks = task_set.tasks
    if not tasks:
        raise SamplingError('empty task set')
    for task in tasks:
        if task.class_list != task_set.class_list:
            raise SamplingError('tasks in a task set must share one class list')
        if task.support_nodes.size != tasks[0].support_nodes.size or task.query_nodes.size != tasks[0].query_nodes.size:
            raise SamplingError('tasks in a task set must share one shape')

    def groups(role: str) -> Tuple[InterpolationGroup, ...]:
        nodes = np.stack([getattr(t, f'{role}_nodes') for t in tasks], axis=1)
        labels = np.stack([getattr(t, f'{role}_labels') for t in tasks], axis=1)
        out = []
        for slot in range(nodes.shape[0]):
            if np.any(labels[slot] != labels[slot, 0]):
                raise SamplingError(f'{role} slot {slot} mixes labels {labels[slot].tolist()}')
            out.append(InterpolationGroup(tuple(int(n) for n in nodes[slot]), int(labels[slot, 0]), role))
        return tuple(out)

    return InterpolatedEpisode(
        support_groups=groups('support'),
        query_groups=groups('query'),
        class_list=task_set.class_list,
    )


def sample_meta_test_task(graph: AttributedGraph, split: str, n_way: int, k_shot: int, k_query: int,
                          rng_seed: int) -> FewShotTask:
    """One clean-labeled task from `split` (the test split at meta-test time)."""
    _check_shape(n_way, k_shot, k_query)
    labels = np.asarray(graph.labels, dtype=np.int64)
    split_classes = graph.split_classes(split)
    pools = _class_pools(labels, graph.split_nodes(split), split_classes)
    need = k_shot + k_query
    class_list = _choose_classes(split_classes, pools, n_way, need, rng_seed, split)
    node_rng = make_rng(rng_seed, 'nodes')
    draws = [node_rng.permutation(pools[c])[:need] for c in class_list]
    return _task_from_draws(draws, class_list, labels, k_shot)


def as_episode(task: FewShotTask) -> InterpolatedEpisode:
    """A single task viewed as an episode of singleton groups."""
    return build_interpolation_groups(TaskSet(tasks=(task,), class_list=task.class_list))
