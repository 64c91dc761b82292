import importlib.util
import json
from pathlib import Path

from metagin.data import load_dataset
from metagin.models import ExperimentConfig

SCRIPT = Path(__file__).resolve().parent.parent / 'scripts' / 'make_benchmark.py'


def _load_script():
    spec = importlib.util.spec_from_file_location('make_benchmark', SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_benchmark_bundle_and_config(tmp_path, capsys):
    make_benchmark = _load_script()
    make_benchmark.make(str(tmp_path / 'desk'), str(tmp_path / 'configs' / 'desk.json'))
    graph = load_dataset(tmp_path / 'desk')
    assert graph.num_nodes == 600
    assert graph.num_features == 16
    assert [len(graph.split_classes(s)) for s in ('train', 'val', 'test')] == [6, 2, 2]
    config = ExperimentConfig.model_validate(json.loads((tmp_path / 'configs' / 'desk.json').read_text()))
    assert config.epsilon == 0.3
    assert (config.n_way, config.k_shot, config.m_tasks) == (2, 1, 5)
    assert config.meta.max_episodes == 2000
    assert not config.record_wall_time
    assert 'fingerprint' in capsys.readouterr().out
