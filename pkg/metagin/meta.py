"""MAML-style meta-optimization over interpolated episodes."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .episodes import FewShotTask, InterpolatedEpisode, as_episode, build_interpolation_groups, sample_task_set
from .errors import DivergenceError, SamplingError, ShapeError
from .gin import episode_logits, episode_loss, features_of
from .graph import AttributedGraph
from .models import MetaConfig, ModelConfig, TrainLogEntry
from .noise import WeakLabels
from .numerics import PARAM_NAMES, ParamSet, grad_of, init_head, init_params
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

LossFn = Callable[[ParamSet], torch.Tensor]
FINETUNED = ('W_e', 'W_c', 'b_c')


@dataclass(frozen=True, eq=False)
class TrainingState:
    params: ParamSet
    episode_counter: int = 0
    best_validation_accuracy: Optional[float] = None
    best_params: Optional[ParamSet] = None
    best_episode: int = 0
    seed_lineage: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: ParamSet
    log: List[TrainLogEntry]
    state: TrainingState
    stopped_early: bool = False


@dataclass(frozen=True, eq=False)
class Prediction:
    labels: np.ndarray
    accuracy: float


def resolve_gradient_mode(config: MetaConfig, params: ParamSet) -> str:
    if config.meta_gradient_mode != 'auto':
        return config.meta_gradient_mode
    return 'exact' if params.num_parameters <= config.exact_max_parameters else 'first_order'


def _tracked(params: ParamSet) -> ParamSet:
    if any(t.requires_grad for t in params.tensors()):
        return params
    return params.requires_grad_()


def adapt(params: ParamSet, loss_fn: LossFn, lr: float, steps: int, create_graph: bool = False,
          only: Sequence[str] = PARAM_NAMES) -> ParamSet:
    """`steps` plain gradient steps on `loss_fn`.

    With create_graph the result stays differentiable with respect to `params`
    (second-order); otherwise the step directions are constants.
    """
    if steps < 1:
        raise ShapeError('inner adaptation needs at least one step')
    current = _tracked(params)
    for step in range(steps):
        loss = loss_fn(current)
        grads = grad_of(loss, current, create_graph=create_graph)
        if not create_graph:
            grads = grads.detach()
        current = current.step(grads, lr, only=only)
    return current


def inner_adapt(params: ParamSet, episode: InterpolatedEpisode, propagated, alpha: float, steps: int,
                variant: str = 'full', leaky_slope: float = 0.2, create_graph: bool = False) -> ParamSet:
    """theta' = theta - alpha * grad L_support(theta), repeated `steps` times."""
    return adapt(
        params,
        lambda p: episode_loss(episode, propagated, p, 'support', variant, leaky_slope),
        alpha, steps, create_graph=create_graph,
    )


def meta_objective_gradient(params: ParamSet, tasks: Sequence[Tuple[LossFn, LossFn]], inner_lr: float,
                            inner_steps: int, mode: str) -> Tuple[float, ParamSet]:
    """Sum over tasks of L_query(adapt(theta, L_support)) and its gradient at theta.

    Tasks are reduced in the given order so the floating-point sum is fixed.
    """
    if not tasks:
        raise ShapeError('meta batch is empty')
    theta = params.requires_grad_()
    total = None
    for support_fn, query_fn in tasks:
        adapted = adapt(theta, support_fn, inner_lr, inner_steps, create_graph=(mode == 'exact'))
        q = query_fn(adapted)
        total = q if total is None else total + q
    if not bool(torch.isfinite(total.detach())):
        raise DivergenceError(f'non-finite meta-loss {float(total.detach())}')
    return float(total.detach()), grad_of(total, theta).detach()


def meta_gradient(params: ParamSet, batch: Sequence[InterpolatedEpisode], propagated, config: MetaConfig,
                  variant: str = 'full', leaky_slope: float = 0.2) -> Tuple[float, ParamSet]:
    tasks = [
        (
            lambda p, ep=ep: episode_loss(ep, propagated, p, 'support', variant, leaky_slope),
            lambda p, ep=ep: episode_loss(ep, propagated, p, 'query', variant, leaky_slope),
        )
        for ep in batch
    ]
    mode = resolve_gradient_mode(config, params)
    return meta_objective_gradient(params, tasks, config.inner_lr, config.inner_steps, mode)


def meta_step(state: TrainingState, batch: Sequence[InterpolatedEpisode], propagated, config: MetaConfig,
              variant: str = 'full', leaky_slope: float = 0.2) -> Tuple[TrainingState, float]:
    """One outer update theta <- theta - beta * grad sum_i L_query(theta_i'). Returns (state, mean query loss)."""
    loss, grads = meta_gradient(state.params, batch, propagated, config, variant, leaky_slope)
    params = state.params.detach().step(grads, config.meta_lr)
    return replace(state, params=params, episode_counter=state.episode_counter + 1), loss / len(batch)


def _sample_episode(graph, labels: WeakLabels, split: str, config: MetaConfig, seed: int) -> InterpolatedEpisode:
    task_set = sample_task_set(graph, labels, split, config.n_way, config.k_shot, config.k_query,
                               config.m_tasks, seed)
    return build_interpolation_groups(task_set)


def validation_scores(params: ParamSet, graph: AttributedGraph, noisy_labeling: WeakLabels, propagated,
                      config: MetaConfig, n_tasks: int, seed: int, variant: str = 'full',
                      leaky_slope: float = 0.2) -> Tuple[float, float]:
    """(accuracy vs weak labels, accuracy vs ground-truth member labels) over n_tasks validation episodes."""
    if n_tasks < 1:
        raise SamplingError('validation needs at least one task')
    if graph.split_nodes('val').size == 0:
        raise SamplingError('validation split is empty')
    base = params.detach()
    weak_hits, clean_hits, weak_total, clean_total = 0, 0, 0, 0
    for t in range(n_tasks):
        episode = _sample_episode(graph, noisy_labeling, 'val', config, derive_seed(seed, 'val-task', t))
        adapted = inner_adapt(base, episode, propagated, config.inner_lr, config.inner_steps, variant, leaky_slope)
        with torch.no_grad():
            logits = episode_logits(episode, propagated, adapted.detach(), 'query', variant, leaky_slope)
        if not bool(torch.isfinite(logits).all()):
            raise DivergenceError(f'non-finite validation logits on task {t}')
        predicted = np.argmax(logits.numpy(), axis=1)
        weak_hits += int((predicted == episode.targets('query')).sum())
        weak_total += predicted.size
        predicted_class = np.asarray(episode.class_list)[predicted]
        members = graph.labels[episode.node_matrix('query')]
        clean_hits += int((members == predicted_class[:, None]).sum())
        clean_total += members.size
    return weak_hits / weak_total, clean_hits / clean_total


def evaluate_validation(params: ParamSet, graph: AttributedGraph, noisy_labeling: WeakLabels, propagated,
                        config: MetaConfig, n_tasks: int, seed: int, variant: str = 'full',
                        leaky_slope: float = 0.2) -> float:
    return validation_scores(params, graph, noisy_labeling, propagated, config, n_tasks, seed,
                             variant, leaky_slope)[0]


def train(graph: AttributedGraph, noisy_labeling: WeakLabels, propagated, model_config: ModelConfig,
          meta_config: MetaConfig, seed: int, variant: str = 'full') -> TrainResult:
    """Meta-train from seeded initial parameters; returns the best validation snapshot and the check log."""
    slope = model_config.leaky_slope
    d = model_config.d or graph.num_features
    lineage = {
        'init': derive_seed(seed, 'init'),
        'episodes': derive_seed(seed, 'episodes'),
        'validation': derive_seed(seed, 'validation'),
    }
    params = init_params(d, model_config.d_hidden, meta_config.n_way, make_rng(lineage['init']))
    validate = meta_config.val_tasks > 0
    state = TrainingState(params=params, best_params=params, seed_lineage=lineage)
    log: List[TrainLogEntry] = []
    if meta_config.max_episodes == 0:
        return TrainResult(params=params, log=log, state=state)

    def check(state: TrainingState, train_loss: float) -> TrainingState:
        try:
            weak, clean = validation_scores(state.params, graph, noisy_labeling, propagated, meta_config,
                                            meta_config.val_tasks, lineage['validation'], variant, slope)
        except DivergenceError as exc:
            logger.error('diverged in validation episode=%d best_episode=%d: %s',
                         state.episode_counter, state.best_episode, exc)
            raise DivergenceError(str(exc), state=state) from exc
        log.append(TrainLogEntry(episode=state.episode_counter, train_loss=train_loss,
                                 val_accuracy=weak, val_clean_accuracy=clean))
        logger.info('episode=%d train_loss=%.4f val_acc=%.4f val_clean_acc=%.4f',
                    state.episode_counter, train_loss, weak, clean)
        if state.best_validation_accuracy is None or weak > state.best_validation_accuracy:
            return replace(state, best_validation_accuracy=weak, best_params=state.params,
                           best_episode=state.episode_counter)
        return state

    if validate:
        state = check(state, float('nan'))
    mode = resolve_gradient_mode(meta_config, params)
    logger.info('meta_gradient_mode=%s parameters=%d variant=%s', mode, params.num_parameters, variant)

    checks_without_gain = 0
    window: List[float] = []
    stopped_early = False
    for episode in range(meta_config.max_episodes):
        batch = [
            _sample_episode(graph, noisy_labeling, 'train', meta_config,
                            derive_seed(lineage['episodes'], episode, b))
            for b in range(meta_config.tasks_per_batch)
        ]
        try:
            state, loss = meta_step(state, batch, propagated, meta_config, variant, slope)
        except DivergenceError as exc:
            logger.error('diverged episode=%d last_finite_episode=%d: %s', episode, state.episode_counter, exc)
            raise DivergenceError(str(exc), state=state) from exc
        window.append(loss)
        if validate and state.episode_counter % meta_config.val_interval == 0:
            previous_best = state.best_validation_accuracy
            state = check(state, float(np.mean(window)))
            window = []
            if state.best_validation_accuracy == previous_best:
                checks_without_gain += 1
                if checks_without_gain >= meta_config.patience:
                    logger.info('early_stop episode=%d best_episode=%d best_val_acc=%.4f',
                                state.episode_counter, state.best_episode, state.best_validation_accuracy)
                    stopped_early = True
                    break
            else:
                checks_without_gain = 0

    if not validate:
        state = replace(state, best_params=state.params, best_episode=state.episode_counter)
        if window:
            log.append(TrainLogEntry(episode=state.episode_counter, train_loss=float(np.mean(window))))
    return TrainResult(params=state.best_params, log=log, state=state, stopped_early=stopped_early)


def finetune_and_predict(params: ParamSet, clean_task: FewShotTask, propagated, config: MetaConfig,
                         seed: int = 0) -> Prediction:
    """Meta-test: no interpolation; fine-tune (W_e, W_c, b_c) on the clean support set, predict the query."""
    work = params.detach()
    if work.n_way != clean_task.n_way:
        W_c, b_c = init_head(work.d_hidden, clean_task.n_way, make_rng(seed, 'head'))
        work = work.with_head(W_c, b_c)
    features = features_of(propagated)
    if features.shape[1] != work.d:
        raise ShapeError(f'features have {features.shape[1]} columns, encoder expects {work.d}')
    episode = as_episode(clean_task)
    if config.finetune_steps > 0:
        work = adapt(
            work,
            lambda p: episode_loss(episode, features, p, 'support', 'naive'),
            config.inner_lr, config.finetune_steps, only=FINETUNED,
        ).detach()
    with torch.no_grad():
        logits = episode_logits(episode, features, work, 'query', 'naive').numpy()
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    positions = np.argmax(logits, axis=1)
    predicted = np.asarray(clean_task.class_list, dtype=np.int64)[positions]
    accuracy = float((predicted == clean_task.query_labels).mean())
    return Prediction(labels=predicted, accuracy=accuracy)
