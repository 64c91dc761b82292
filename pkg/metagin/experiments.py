"""Experiment protocol: noise -> meta-train -> clean meta-test, repeated with derived seeds."""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import psutil

from . import db
from .data import load_dataset, synthesize
from .episodes import sample_meta_test_task
from .errors import ConfigError, DataError, MetaGinError
from .graph import AttributedGraph, propagated_features
from .meta import TrainResult, finetune_and_predict, train
from .models import ExperimentConfig, ResultRecord, SyntheticSpec
from .noise import inject_split_noise
from .seeding import derive_seed

logger = logging.getLogger(__name__)

VARIANT_ORDER = ('full', 'mlp', 'mean', 'naive')
SWEEPABLE = ('m_tasks', 'k_shot')
REPORT_COLUMNS = ['fingerprint', 'dataset', 'variant', 'N', 'K', 'M', 'noise_kind', 'epsilon', 'rep_count',
                  'mean_acc', 'std_acc', 'wall_s', 'master_seed']
# x-axis column -> (file stem, columns that must agree along one curve)
PLOT_CURVES = {
    'epsilon': ('accuracy_vs_epsilon', ['variant', 'noise_kind', 'N', 'K', 'M']),
    'M': ('accuracy_vs_m_tasks', ['variant', 'noise_kind', 'epsilon', 'N', 'K']),
    'K': ('accuracy_vs_k_shot', ['variant', 'noise_kind', 'epsilon', 'N', 'M']),
}


@dataclass(frozen=True, eq=False)
class RepetitionOutcome:
    index: int
    seed: int
    accuracy: float
    task_accuracies: List[float]
    training: TrainResult


@dataclass(frozen=True, eq=False)
class ExperimentRun:
    record: ResultRecord
    repetitions: List[RepetitionOutcome]


def load_graph(config: ExperimentConfig) -> AttributedGraph:
    if config.dataset:
        return load_dataset(config.dataset)
    return synthesize(config.synthetic or SyntheticSpec()).to_graph()


def repetition_seed(master_seed: int, r: int) -> int:
    return derive_seed(master_seed, 'repetition', r)


def resolve_workers(requested: int) -> int:
    if requested == 0:
        return max(1, psutil.cpu_count(logical=False) or 1)
    return requested


def run_repetition(config: ExperimentConfig, graph: AttributedGraph, r: int) -> RepetitionOutcome:
    """One repetition; reproducible in isolation from (config, r)."""
    seed = repetition_seed(config.master_seed, r)
    model_config = config.model.resolved(graph.num_features, config.n_way)
    propagated = propagated_features(graph, model_config.propagation_hops)
    weak = inject_split_noise(graph, config.noise_kind, config.epsilon, derive_seed(seed, 'noise'))
    training = train(graph, weak, propagated, model_config, config.meta, derive_seed(seed, 'train'), config.variant)
    accs = []
    for t in range(config.n_test_tasks):
        task_seed = derive_seed(seed, 'test-task', t)
        task = sample_meta_test_task(graph, 'test', config.n_way, config.k_shot, config.k_query, task_seed)
        accs.append(finetune_and_predict(training.params, task, propagated, config.meta, seed=task_seed).accuracy)
    accuracy = float(np.mean(accs))
    logger.info('experiment=%s variant=%s epsilon=%.3f repetition=%d accuracy=%.4f',
                config.name, config.variant, config.epsilon, r, accuracy)
    return RepetitionOutcome(index=r, seed=seed, accuracy=accuracy, task_accuracies=accs, training=training)


def execute(config: ExperimentConfig, graph: Optional[AttributedGraph] = None) -> ExperimentRun:
    started = time.perf_counter()
    graph = graph if graph is not None else load_graph(config)

    def one(r: int) -> RepetitionOutcome:
        try:
            return run_repetition(config, graph, r)
        except MetaGinError as exc:
            raise exc.annotate(r)

    workers = resolve_workers(config.workers)
    indices = range(config.n_repetitions)
    if workers > 1 and config.n_repetitions > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, indices))
    else:
        outcomes = [one(r) for r in indices]
    outcomes.sort(key=lambda o: o.index)

    record = ResultRecord.from_run(
        config,
        [o.accuracy for o in outcomes],
        time.perf_counter() - started,
        {str(o.index): o.seed for o in outcomes},
    )
    logger.info('experiment=%s fingerprint=%s mean=%.4f std=%.4f', config.name, record.fingerprint,
                record.mean, record.std)
    return ExperimentRun(record=record, repetitions=outcomes)


def run_experiment(config: ExperimentConfig) -> ResultRecord:
    return execute(config).record


def variant_config(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    updates = {'variant': variant}
    if variant == 'naive':
        updates['meta.m_tasks'] = 1
    return config.with_updates(**updates)


def ablation_runs(config: ExperimentConfig) -> List[ExperimentRun]:
    graph = load_graph(config)
    return [execute(variant_config(config, v), graph) for v in VARIANT_ORDER]


def run_ablation(config: ExperimentConfig) -> List[ResultRecord]:
    """full, mlp, mean, naive (naive with M = 1) under one master seed."""
    return [run.record for run in ablation_runs(config)]


def noise_sweep_runs(config: ExperimentConfig, epsilons: Sequence[float]) -> List[ExperimentRun]:
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise ConfigError('no noise ratios given')
    if len(set(epsilons)) != len(epsilons):
        raise ConfigError(f'duplicate noise ratios in {epsilons}')
    if any(not 0.0 <= e <= 1.0 for e in epsilons):
        raise ConfigError(f'noise ratios must lie in [0, 1]: {epsilons}')
    graph = load_graph(config)
    return [execute(config.with_updates(epsilon=e), graph) for e in epsilons]


def run_noise_sweep(config: ExperimentConfig, epsilons: Sequence[float]) -> List[ResultRecord]:
    return [run.record for run in noise_sweep_runs(config, epsilons)]


def parameter_sweep_runs(config: ExperimentConfig, parameter: str, values: Sequence[int]) -> List[ExperimentRun]:
    if parameter not in SWEEPABLE:
        raise ConfigError(f'parameter must be one of {SWEEPABLE}, got {parameter!r}')
    values = [int(v) for v in values]
    if not values or len(set(values)) != len(values):
        raise ConfigError(f'sweep values must be non-empty and distinct: {values}')
    if parameter == 'm_tasks' and config.variant == 'naive' and values != [1]:
        raise ConfigError('the naive variant only runs with m_tasks = 1')
    graph = load_graph(config)
    return [execute(config.with_updates(**{f'meta.{parameter}': v}), graph) for v in values]


def run_parameter_sweep(config: ExperimentConfig, parameter: str, values: Sequence[int]) -> List[ResultRecord]:
    """Sensitivity to the task-set size M or the support size K."""
    return [run.record for run in parameter_sweep_runs(config, parameter, values)]


def record_to_ledger(run: ExperimentRun) -> int:
    db.init_db()
    rid = db.add_result(run.record)
    for outcome in run.repetitions:
        db.add_train_log(rid, outcome.index, outcome.training.log)
    return rid


def _report_row(record: ResultRecord) -> Dict:
    return {
        'fingerprint': record.fingerprint,
        'dataset': record.dataset,
        'variant': record.variant,
        'N': record.n_way,
        'K': record.k_shot,
        'M': record.m_tasks,
        'noise_kind': record.noise_kind,
        'epsilon': record.epsilon,
        'rep_count': len(record.accuracies),
        'mean_acc': record.mean,
        'std_acc': record.std,
        'wall_s': record.wall_s,
        'master_seed': record.master_seed,
    }


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, lineterminator='\n', float_format=None)


def write_report(records: Sequence[ResultRecord], output_dir) -> List[Path]:
    """results.csv, results.json and plotdata/*.csv; byte-deterministic for identical records."""
    if not records:
        raise ConfigError('no records to report')
    out = Path(output_dir)
    try:
        return _write_report_files(records, out)
    except OSError as exc:
        raise DataError(f'cannot write report to {out}: {exc}') from exc


def _write_report_files(records: Sequence[ResultRecord], out: Path) -> List[Path]:
    (out / 'plotdata').mkdir(parents=True, exist_ok=True)
    written = []

    table = pd.DataFrame([_report_row(r) for r in records], columns=REPORT_COLUMNS)
    _write_csv(table, out / 'results.csv')
    written.append(out / 'results.csv')

    payload = [r.model_dump(mode='json') for r in records]
    (out / 'results.json').write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    written.append(out / 'results.json')

    many_datasets = table['dataset'].nunique() > 1
    for axis, (stem, keys) in PLOT_CURVES.items():
        keys = (['dataset'] if many_datasets else []) + keys
        for key, group in table.groupby(keys, sort=True):
            if group[axis].nunique() < 2:
                continue
            path = out / 'plotdata' / f'{stem}_{_curve_tag(dict(zip(keys, key)))}.csv'
            curve = group.sort_values(axis, kind='stable')[[axis, 'mean_acc', 'std_acc', 'rep_count']]
            _write_csv(curve, path)
            written.append(path)
    return written


def _curve_tag(fields: Dict) -> str:
    parts = []
    for k, v in fields.items():
        if k in ('N', 'K', 'M'):
            parts.append(f'{k}{v}')
        elif k == 'epsilon':
            parts.append(f'eps{v}')
        else:
            parts.append(str(v).replace('/', '-'))
    return '_'.join(parts)
