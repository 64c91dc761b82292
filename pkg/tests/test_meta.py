import math

import numpy as np
import pytest
import torch

from metagin import meta
from metagin.data import synthesize
from metagin.episodes import FewShotTask, build_interpolation_groups, sample_meta_test_task, sample_task_set
from metagin.errors import DivergenceError, SamplingError
from metagin.gin import episode_loss
from metagin.graph import propagated_features
from metagin.meta import (
    TrainingState,
    adapt,
    evaluate_validation,
    finetune_and_predict,
    inner_adapt,
    meta_gradient,
    meta_objective_gradient,
    meta_step,
    resolve_gradient_mode,
    train,
)
from metagin.models import MetaConfig, ModelConfig, SyntheticSpec
from metagin.noise import clean_labels, inject_split_noise
from metagin.numerics import ParamSet, init_params, max_relative_error, numeric_gradient
from metagin.seeding import derive_seed, make_rng


def _same(a: ParamSet, b: ParamSet) -> bool:
    return all(torch.equal(x.detach(), y.detach()) for x, y in zip(a.tensors(), b.tensors()))


def _scalar_params(value: float) -> ParamSet:
    return ParamSet(
        W_e=torch.full((1, 1), value, dtype=torch.float64),
        w=torch.zeros(2, dtype=torch.float64),
        a=torch.zeros(2, dtype=torch.float64),
        W_c=torch.zeros((1, 1), dtype=torch.float64),
        b_c=torch.zeros(1, dtype=torch.float64),
    )


def _tiny_meta(**overrides) -> MetaConfig:
    values = dict(inner_lr=0.1, meta_lr=0.01, tasks_per_batch=2, max_episodes=4, val_interval=2, val_tasks=2,
                  patience=5, finetune_steps=3, n_way=3, k_shot=1, k_query=1, m_tasks=2)
    values.update(overrides)
    return MetaConfig(**values)


def test_inner_adapt_with_zero_rate_is_identity(tiny_episode, tiny_propagated, tiny_params):
    adapted = inner_adapt(tiny_params, tiny_episode, tiny_propagated, 0.0, 1)
    assert _same(adapted, tiny_params)


def test_adapt_on_square_loss():
    adapted = adapt(_scalar_params(1.0), lambda p: (p.W_e ** 2).sum(), lr=0.1, steps=1)
    assert float(adapted.W_e) == pytest.approx(0.8, abs=1e-15)


def test_inner_adapt_matches_finite_difference_step(tiny_episode, tiny_propagated, tiny_params):
    def support(p):
        return episode_loss(tiny_episode, tiny_propagated, p, 'support', 'full')

    adapted = inner_adapt(tiny_params, tiny_episode, tiny_propagated, 0.1, 1).detach()
    fd = numeric_gradient(support, tiny_params)
    expected = tiny_params.step(fd, 0.1)
    assert max_relative_error(adapted, expected) < 1e-4
    assert _same(tiny_params, init_params(6, 4, 3, make_rng(11, 'init')))


def test_meta_step_with_zero_meta_rate(tiny_episode, tiny_propagated, tiny_params):
    state = TrainingState(params=tiny_params)
    new_state, loss = meta_step(state, [tiny_episode], tiny_propagated, _tiny_meta(meta_lr=0.0))
    assert _same(new_state.params, tiny_params)
    assert new_state.episode_counter == 1
    assert math.isfinite(loss)


def test_exact_and_first_order_agree_without_curvature():
    rng = np.random.default_rng(0)
    params = init_params(3, 2, 2, rng)
    C = torch.from_numpy(rng.standard_normal((3, 2)))
    c = torch.from_numpy(rng.standard_normal(2))

    def support(p):
        return (p.W_e * C).sum() + (p.b_c * c).sum()

    def query(p):
        return (p.W_e ** 2).sum() + (p.b_c ** 3).sum() + (p.W_c ** 2).sum()

    _, exact = meta_objective_gradient(params, [(support, query)], 0.1, 1, 'exact')
    _, first = meta_objective_gradient(params, [(support, query)], 0.1, 1, 'first_order')
    assert float((exact.flatten() - first.flatten()).abs().max()) < 1e-12


def test_exact_meta_gradient_matches_finite_differences(tiny_episode, tiny_propagated, tiny_params):
    def support(p):
        return episode_loss(tiny_episode, tiny_propagated, p, 'support', 'full')

    def query(p):
        return episode_loss(tiny_episode, tiny_propagated, p, 'query', 'full')

    def objective(p):
        with torch.enable_grad():
            adapted = adapt(p, support, 0.1, 1)
            return query(adapted).detach()

    _, analytic = meta_objective_gradient(tiny_params, [(support, query)], 0.1, 1, 'exact')
    numeric = numeric_gradient(objective, tiny_params)
    assert max_relative_error(analytic, numeric, floor=1e-6) < 1e-4
    assert float((analytic.flatten() - numeric.flatten()).abs().max()) < 1e-8


def test_first_order_differs_from_exact_with_curvature(tiny_episode, tiny_propagated, tiny_params):
    config = _tiny_meta(meta_gradient_mode='exact')
    _, exact = meta_gradient(tiny_params, [tiny_episode], tiny_propagated, config)
    _, first = meta_gradient(tiny_params, [tiny_episode], tiny_propagated,
                             config.model_copy(update={'meta_gradient_mode': 'first_order'}))
    assert float((exact.flatten() - first.flatten()).abs().max()) > 1e-10


def test_update_is_a_descent_direction(tiny_graph, tiny_propagated, tiny_params):
    config = _tiny_meta(meta_lr=0.05)
    batch = [build_interpolation_groups(sample_task_set(tiny_graph, clean_labels(tiny_graph), 'train', 3, 1, 1, 2,
                                                        rng_seed=s)) for s in (1, 2)]
    _, grads = meta_gradient(tiny_params, batch, tiny_propagated, config)
    new_state, _ = meta_step(TrainingState(params=tiny_params), batch, tiny_propagated, config)
    update = new_state.params.map(lambda x: x.detach()).flatten() - tiny_params.flatten()
    g = grads.flatten()
    assert float(g.norm()) > 1e-10
    assert float(update @ g) < 0


def test_resolve_gradient_mode(tiny_params):
    assert resolve_gradient_mode(MetaConfig(), tiny_params) == 'exact'
    assert resolve_gradient_mode(MetaConfig(exact_max_parameters=10), tiny_params) == 'first_order'
    assert resolve_gradient_mode(MetaConfig(meta_gradient_mode='first_order'), tiny_params) == 'first_order'


def test_train_without_episodes_returns_initial_params(tiny_graph, tiny_propagated):
    weak = clean_labels(tiny_graph)
    result = train(tiny_graph, weak, tiny_propagated, ModelConfig(d=6, d_hidden=4), _tiny_meta(max_episodes=0),
                   seed=3)
    assert result.log == []
    initial = init_params(6, 4, 3, make_rng(derive_seed(3, 'init')))
    assert _same(result.params, initial)


def _log_rows(log):
    return np.array([[e.episode, e.train_loss, e.val_accuracy, e.val_clean_accuracy] for e in log], dtype=float)


def test_train_is_deterministic(tiny_graph, tiny_propagated):
    weak = inject_split_noise(tiny_graph, 'symmetric', 0.2, seed=1)
    a = train(tiny_graph, weak, tiny_propagated, ModelConfig(d=6, d_hidden=4), _tiny_meta(), seed=5)
    b = train(tiny_graph, weak, tiny_propagated, ModelConfig(d=6, d_hidden=4), _tiny_meta(), seed=5)
    assert _same(a.params, b.params)
    assert np.array_equal(_log_rows(a.log), _log_rows(b.log), equal_nan=True)
    assert [e.episode for e in a.log] == [0, 2, 4]
    assert math.isnan(a.log[0].train_loss)
    assert all(0.0 <= e.val_accuracy <= 1.0 for e in a.log)
    assert a.state.best_validation_accuracy == max(e.val_accuracy for e in a.log)


def test_train_stops_when_validation_stalls(tiny_graph, tiny_propagated):
    weak = clean_labels(tiny_graph)
    config = _tiny_meta(meta_lr=0.0, max_episodes=50, val_interval=1, patience=3)
    result = train(tiny_graph, weak, tiny_propagated, ModelConfig(d=6, d_hidden=4), config, seed=2)
    assert result.stopped_early
    assert result.state.episode_counter == 3
    assert len(result.log) == 4
    assert result.state.best_episode == 0


def test_train_reports_last_finite_state_on_divergence(tiny_graph, tiny_propagated, monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceError('non-finite meta-loss nan')

    monkeypatch.setattr(meta, 'meta_step', boom)
    with pytest.raises(DivergenceError) as info:
        train(tiny_graph, clean_labels(tiny_graph), tiny_propagated, ModelConfig(d=6, d_hidden=4),
              _tiny_meta(), seed=0)
    assert info.value.state is not None
    assert info.value.state.episode_counter == 0


def test_divergence_in_validation_carries_state(tiny_graph, tiny_propagated, monkeypatch):
    real = meta.validation_scores
    calls = []

    def fails_second_time(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise DivergenceError('non-finite validation logits on task 0')
        return real(*args, **kwargs)

    monkeypatch.setattr(meta, 'validation_scores', fails_second_time)
    with pytest.raises(DivergenceError) as info:
        train(tiny_graph, clean_labels(tiny_graph), tiny_propagated, ModelConfig(d=6, d_hidden=4),
              _tiny_meta(val_interval=1), seed=0)
    state = info.value.state
    assert state is not None
    assert state.episode_counter == 1
    assert state.best_episode == 0
    assert state.best_validation_accuracy is not None


def test_validation_rejects_non_finite_parameters(tiny_graph, tiny_propagated, tiny_params):
    broken = tiny_params.map(lambda t: torch.full_like(t, float('nan')))
    with pytest.raises(DivergenceError):
        evaluate_validation(broken, tiny_graph, clean_labels(tiny_graph), tiny_propagated, _tiny_meta(),
                            n_tasks=1, seed=0)


def _five_way_graph():
    spec = SyntheticSpec(name='five', classes=12, nodes_per_class=10, p_in=0.2, p_out=0.02, dim=4,
                         split_counts=(2, 5, 5), seed=4)
    return synthesize(spec).to_graph()


def test_validation_with_zero_params_is_chance():
    g = _five_way_graph()
    prop = propagated_features(g, 2)
    config = _tiny_meta(n_way=5, k_shot=1, k_query=2, m_tasks=2)
    zero = init_params(4, 3, 5, make_rng(0)).map(torch.zeros_like)
    acc = evaluate_validation(zero, g, clean_labels(g), prop, config, n_tasks=100, seed=1)
    assert abs(acc - 0.2) <= 0.05
    assert acc == evaluate_validation(zero, g, clean_labels(g), prop, config, n_tasks=100, seed=1)
    with pytest.raises(SamplingError):
        evaluate_validation(zero, g, clean_labels(g), prop, config, n_tasks=0, seed=1)


def test_finetune_without_steps_breaks_ties_low(tiny_graph, tiny_propagated):
    task = sample_meta_test_task(tiny_graph, 'test', 3, 2, 2, rng_seed=4)
    zero = init_params(6, 4, 3, make_rng(0)).map(torch.zeros_like)
    pred = finetune_and_predict(zero, task, tiny_propagated, _tiny_meta(finetune_steps=0))
    assert set(pred.labels.tolist()) == {task.class_list[0]}
    assert pred.accuracy == pytest.approx(1 / 3)


def test_finetune_separates_linear_fixture():
    x = np.zeros((20, 2))
    x[:10] = [[10.0 + 0.1 * i, 0.2 * i] for i in range(10)]
    x[10:] = [[0.2 * i, 10.0 + 0.1 * i] for i in range(10)]
    features = torch.from_numpy(x)
    labels = np.array([7] * 10 + [3] * 10)
    support = np.array([0, 1, 2, 3, 4, 10, 11, 12, 13, 14])
    query = np.array([5, 6, 7, 8, 9, 15, 16, 17, 18, 19])
    task = FewShotTask(support, labels[support], query, labels[query], (7, 3))
    params = ParamSet(
        W_e=torch.eye(2, dtype=torch.float64),
        w=torch.zeros(4, dtype=torch.float64),
        a=torch.zeros(2, dtype=torch.float64),
        W_c=torch.zeros((2, 2), dtype=torch.float64),
        b_c=torch.zeros(2, dtype=torch.float64),
    )
    before = params.detach()
    pred = finetune_and_predict(params, task, features, MetaConfig(inner_lr=0.1, finetune_steps=10))
    assert pred.accuracy == 1.0
    assert pred.labels.tolist() == labels[query].tolist()
    assert _same(params, before)


def test_finetune_reinitializes_head_for_new_way_count(tiny_graph, tiny_propagated):
    params = init_params(6, 4, 2, make_rng(1))
    task = sample_meta_test_task(tiny_graph, 'test', 3, 1, 2, rng_seed=0)
    pred = finetune_and_predict(params, task, tiny_propagated, _tiny_meta(), seed=9)
    assert pred.labels.size == 6
    assert set(pred.labels.tolist()) <= set(task.class_list)
    assert 0.0 <= pred.accuracy <= 1.0
