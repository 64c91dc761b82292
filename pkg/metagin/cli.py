"""Command-line entry point: `python -m metagin <subcommand> ...`.

Exit codes: 0 success, 1 usage or configuration error, 2 data or sampling
error, 3 numeric divergence.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import db
from .data import generate_sbm, load_dataset, load_params, read_weak_labels, save_params, write_bundle, \
    write_train_log, write_weak_labels
from .episodes import sample_meta_test_task
from .errors import ConfigError, DataError, DivergenceError, MetaGinError, SamplingError, ShapeError
from .experiments import ExperimentRun, ablation_runs, execute, noise_sweep_runs, parameter_sweep_runs, \
    record_to_ledger, write_report
from .graph import propagated_features
from .meta import finetune_and_predict, train
from .models import ExperimentConfig, MetaConfig
from .noise import inject_split_noise
from .seeding import derive_seed

logger = logging.getLogger('metagin')

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file not found: {path}')
    return ExperimentConfig.model_validate_json(path.read_text(encoding='utf-8'))


def _env_workers() -> Optional[int]:
    raw = os.environ.get('METAGIN_WORKERS')
    if raw is None or raw == '':
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f'METAGIN_WORKERS must be an integer, got {raw!r}')


def _experiment_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    updates = {}
    workers = args.workers if getattr(args, 'workers', None) is not None else _env_workers()
    if workers is not None:
        updates['workers'] = workers
    return config.with_updates(**updates) if updates else config


def _ledger_path(args) -> Optional[str]:
    return getattr(args, 'ledger', None) or os.environ.get('METAGIN_LEDGER')


def _finish(runs: Sequence[ExperimentRun], args) -> int:
    out = Path(args.out)
    write_report([r.record for r in runs], out)
    if len(runs) == 1:
        first = runs[0].repetitions[0]
        save_params(first.training.params, out / 'params.json', fingerprint=runs[0].record.fingerprint,
                    repetition=first.index, propagation_hops=runs[0].record.config['model']['propagation_hops'])
        write_train_log(first.training.log, out / 'train_log.csv')
    ledger = _ledger_path(args)
    if ledger:
        db.DB_PATH = ledger
        for run in runs:
            record_to_ledger(run)
    for run in runs:
        r = run.record
        print(f'{r.fingerprint} {r.variant:<5} eps={r.epsilon:.2f} N={r.n_way} K={r.k_shot} M={r.m_tasks} '
              f'acc={r.mean:.4f} +/- {r.std:.4f}')
    return EXIT_OK


def cmd_synth(args) -> int:
    if len(args.splits) != 3:
        raise ConfigError('--splits takes three comma-separated counts a,b,c')
    bundle = generate_sbm(classes=args.classes, nodes_per_class=args.nodes_per_class, p_in=args.p_in,
                          p_out=args.p_out, d=args.dim, mean_separation=args.separation, feature_std=args.std,
                          split_counts=args.splits, seed=args.seed, name=args.name or Path(args.out).name)
    path = write_bundle(bundle, args.out)
    print(f'wrote {path} nodes={bundle.labels.size} edges={len(bundle.edges)}')
    return EXIT_OK


def cmd_inject_noise(args) -> int:
    graph = load_dataset(args.data)
    weak = inject_split_noise(graph, args.kind, args.epsilon, args.seed)
    write_weak_labels(graph, weak, args.out)
    print(f'wrote {args.out} flipped={int(weak.flip_mask.sum())} fraction={weak.flip_fraction:.4f}')
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    graph = load_dataset(args.data)
    if args.labels:
        weak = read_weak_labels(graph, args.labels)
    else:
        weak = inject_split_noise(graph, config.noise_kind, config.epsilon, derive_seed(args.seed, 'noise'))
    model_config = config.model.resolved(graph.num_features, config.n_way)
    propagated = propagated_features(graph, model_config.propagation_hops)
    result = train(graph, weak, propagated, model_config, config.meta, derive_seed(args.seed, 'train'),
                   config.variant)
    save_params(result.params, args.out, fingerprint=config.fingerprint(), seed=args.seed,
                propagation_hops=model_config.propagation_hops, variant=config.variant)
    if args.log:
        write_train_log(result.log, args.log)
    print(f'wrote {args.out} best_episode={result.state.best_episode} '
          f'best_val_acc={result.state.best_validation_accuracy}')
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.tasks < 1:
        raise ConfigError('--tasks must be at least 1')
    graph = load_dataset(args.data)
    params, metadata = load_params(args.params)
    meta = load_config(args.config).meta if args.config else MetaConfig()
    hops = args.hops if args.hops is not None else int(metadata.get('propagation_hops', 2))
    propagated = propagated_features(graph, hops)
    accs = []
    for t in range(args.tasks):
        seed = derive_seed(args.seed, 'test-task', t)
        task = sample_meta_test_task(graph, 'test', args.n_way, args.k_shot, args.query, seed)
        accs.append(finetune_and_predict(params, task, propagated, meta, seed=seed).accuracy)
    summary = {'tasks': args.tasks, 'mean_acc': float(np.mean(accs)), 'std_acc': float(np.std(accs))}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    return _finish([execute(_experiment_config(args))], args)


def cmd_ablate(args) -> int:
    return _finish(ablation_runs(_experiment_config(args)), args)


def cmd_sweep(args) -> int:
    return _finish(noise_sweep_runs(_experiment_config(args), args.epsilons), args)


def cmd_param_sweep(args) -> int:
    return _finish(parameter_sweep_runs(_experiment_config(args), args.parameter, args.values), args)


def cmd_serve(args) -> int:
    import uvicorn

    ledger = _ledger_path(args)
    if ledger:
        db.DB_PATH = ledger
    from .api import app
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog='metagin', description='Weakly-supervised few-shot node classification')
    p.add_argument('--log-level', default=os.environ.get('METAGIN_LOG_LEVEL', 'INFO'),
                   choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], type=str.upper)
    sub = p.add_subparsers(dest='command', required=True, parser_class=_Parser)

    s = sub.add_parser('synth', help='write a synthetic SBM dataset bundle')
    s.add_argument('--out', required=True)
    s.add_argument('--name', default=None)
    s.add_argument('--classes', type=int, default=10)
    s.add_argument('--nodes-per-class', type=int, default=60)
    s.add_argument('--p-in', type=float, default=0.1)
    s.add_argument('--p-out', type=float, default=0.01)
    s.add_argument('--dim', type=int, default=16)
    s.add_argument('--separation', type=float, default=4.0)
    s.add_argument('--std', type=float, default=1.0)
    s.add_argument('--splits', type=_ints, default=[6, 2, 2])
    s.add_argument('--seed', type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser('inject-noise', help='corrupt train/val labels of a bundle')
    s.add_argument('--data', required=True)
    s.add_argument('--kind', required=True, choices=['sym', 'asym', 'symmetric', 'asymmetric'])
    s.add_argument('--epsilon', type=float, required=True)
    s.add_argument('--seed', type=int, default=0)
    s.add_argument('--out', required=True)
    s.set_defaults(func=cmd_inject_noise)

    s = sub.add_parser('train', help='meta-train one model')
    s.add_argument('--data', required=True)
    s.add_argument('--config', required=True)
    s.add_argument('--labels', default=None, help='weak labels written by inject-noise')
    s.add_argument('--seed', type=int, default=0)
    s.add_argument('--out', required=True)
    s.add_argument('--log', default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser('eval', help='fine-tune and evaluate on clean meta-test tasks')
    s.add_argument('--data', required=True)
    s.add_argument('--params', required=True)
    s.add_argument('--config', default=None)
    s.add_argument('--n-way', type=int, default=2)
    s.add_argument('--k-shot', type=int, default=1)
    s.add_argument('--query', type=int, default=5)
    s.add_argument('--tasks', type=int, default=100)
    s.add_argument('--hops', type=int, default=None)
    s.add_argument('--seed', type=int, default=0)
    s.set_defaults(func=cmd_eval)

    for name, func, help_text in (('run', cmd_run, 'full protocol: noise, train, eval, report'),
                                  ('ablate', cmd_ablate, 'full, mlp, mean and naive variants'),
                                  ('sweep', cmd_sweep, 'one experiment per noise ratio'),
                                  ('param-sweep', cmd_param_sweep, 'one experiment per M or K value')):
        s = sub.add_parser(name, help=help_text)
        s.add_argument('--config', required=True)
        s.add_argument('--out', required=True)
        s.add_argument('--ledger', default=None)
        s.add_argument('--workers', type=int, default=None)
        if name == 'sweep':
            s.add_argument('--epsilons', type=_floats, required=True)
        if name == 'param-sweep':
            s.add_argument('--parameter', required=True, choices=['m_tasks', 'k_shot'])
            s.add_argument('--values', type=_ints, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser('serve', help='read-only HTTP view of the results ledger')
    s.add_argument('--ledger', default=None)
    s.add_argument('--host', default='127.0.0.1')
    s.add_argument('--port', type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format='%(asctime)s %(levelname)s %(name)s %(message)s')
    try:
        return args.func(args)
    except DivergenceError as exc:
        logger.error('diverged: %s', exc)
        return EXIT_DIVERGED
    except (DataError, SamplingError, ShapeError) as exc:
        logger.error('data error: %s', exc)
        return EXIT_DATA
    except OSError as exc:
        logger.error('io error: %s', exc)
        return EXIT_DATA
    except (ConfigError, ValidationError) as exc:
        logger.error('invalid configuration: %s', exc)
        return EXIT_USAGE
    except MetaGinError as exc:
        logger.error('%s', exc)
        return EXIT_USAGE
