"""Graph Interpolation Network forward pass.

Every function accepts leading batch dimensions: a group is (..., M, d'),
so a whole episode is evaluated as one (G, M, d') tensor.
"""
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F

from .episodes import InterpolatedEpisode
from .errors import ConfigError, ShapeError
from .graph import PropagatedFeatures
from .numerics import LOG_FLOOR, ParamSet, as_tensor, cross_entropy_from_logits, leaky_relu

Variant = Literal['full', 'mlp', 'mean', 'naive']
VARIANTS = ('full', 'mlp', 'mean', 'naive')


@dataclass(frozen=True, eq=False)
class GroupForward:
    prototype: torch.Tensor
    deltas: torch.Tensor
    attention: torch.Tensor
    scores: torch.Tensor
    weights: torch.Tensor
    representation: torch.Tensor


def _rows(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else as_tensor(x)


def encode(rows, W_e: torch.Tensor) -> torch.Tensor:
    """z = x W_e for every propagated row."""
    rows = _rows(rows)
    if rows.shape[-1] != W_e.shape[0]:
        raise ShapeError(f'feature dimension {rows.shape[-1]} does not match W_e {tuple(W_e.shape)}')
    return rows @ W_e


def group_statistics(embeddings: torch.Tensor):
    """Prototype (member mean) and per-member deltas z_j - p."""
    embeddings = _rows(embeddings)
    if embeddings.ndim < 2 or embeddings.shape[-2] == 0:
        raise ShapeError('a group needs at least one member')
    prototype = embeddings.mean(dim=-2)
    return prototype, embeddings - prototype.unsqueeze(-2)


def _member_scores(embeddings: torch.Tensor, deltas: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """h_j = w^T [z_j || delta_j]."""
    if embeddings.shape != deltas.shape:
        raise ShapeError('embeddings and deltas differ in shape')
    if w.shape[-1] != 2 * embeddings.shape[-1]:
        raise ShapeError(f'w has length {w.shape[-1]}, expected {2 * embeddings.shape[-1]}')
    return torch.cat([embeddings, deltas], dim=-1) @ w


def attention_weights(embeddings, deltas, w: torch.Tensor, a: torch.Tensor, leaky_slope: float = 0.2) -> torch.Tensor:
    """alpha_ij = softmax_j leaky(a^T [h_i || h_j]) over the full group, self-pair included."""
    h = _member_scores(_rows(embeddings), _rows(deltas), w)
    if a.shape != (2,):
        raise ShapeError(f'a has shape {tuple(a.shape)}, expected (2,)')
    logits = leaky_relu(a[0] * h.unsqueeze(-1) + a[1] * h.unsqueeze(-2), leaky_slope)
    return torch.softmax(logits, dim=-1)


def _score_logits(embeddings, deltas, alpha, w) -> torch.Tensor:
    h = _member_scores(embeddings, deltas, w)
    if alpha.shape[-1] != h.shape[-1] or alpha.shape[-2] != h.shape[-1]:
        raise ShapeError('attention matrix does not match group size')
    return (alpha @ h.unsqueeze(-1)).squeeze(-1)


def confidence_scores(embeddings, deltas, alpha, w: torch.Tensor) -> torch.Tensor:
    """s_i = sigmoid(sum_j alpha_ij h_j)."""
    return torch.sigmoid(_score_logits(_rows(embeddings), _rows(deltas), _rows(alpha), w))


def _convex_weights(log_scores: torch.Tensor) -> torch.Tensor:
    # s_i / sum(s) evaluated as softmax(log s); a singleton group gets weight exactly 1
    return torch.softmax(log_scores, dim=-1)


def _combine(embeddings: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (weights.unsqueeze(-1) * embeddings).sum(dim=-2)


def interpolate_group(embeddings, scores) -> torch.Tensor:
    """c = sum_i s_i z_i / sum_i s_i."""
    embeddings, scores = _rows(embeddings), _rows(scores)
    if scores.shape != embeddings.shape[:-1]:
        raise ShapeError('one score per member is required')
    return _combine(embeddings, _convex_weights(torch.log(torch.clamp(scores, min=LOG_FLOOR))))


def classify(c, W_c: torch.Tensor, b_c: torch.Tensor) -> torch.Tensor:
    return torch.softmax(classifier_logits(c, W_c, b_c), dim=-1)


def classifier_logits(c, W_c: torch.Tensor, b_c: torch.Tensor) -> torch.Tensor:
    c = _rows(c)
    if c.shape[-1] != W_c.shape[0] or W_c.shape[1] != b_c.shape[0]:
        raise ShapeError(f'representation {tuple(c.shape)} does not fit W_c {tuple(W_c.shape)} / b_c {tuple(b_c.shape)}')
    return c @ W_c + b_c


def group_forward(embeddings, params: ParamSet, leaky_slope: float = 0.2) -> GroupForward:
    embeddings = _rows(embeddings)
    prototype, deltas = group_statistics(embeddings)
    alpha = attention_weights(embeddings, deltas, params.w, params.a, leaky_slope)
    pre = _score_logits(embeddings, deltas, alpha, params.w)
    weights = _convex_weights(F.logsigmoid(pre))
    return GroupForward(
        prototype=prototype,
        deltas=deltas,
        attention=alpha,
        scores=torch.sigmoid(pre),
        weights=weights,
        representation=_combine(embeddings, weights),
    )


def represent(embeddings: torch.Tensor, params: ParamSet, variant: str, leaky_slope: float = 0.2) -> torch.Tensor:
    """Collapse (..., M, d') groups into (..., d') representations per variant."""
    if variant == 'full':
        return group_forward(embeddings, params, leaky_slope).representation
    if variant == 'mean':
        return group_statistics(embeddings)[0]
    if variant == 'mlp':
        _, deltas = group_statistics(embeddings)
        pre = _member_scores(embeddings, deltas, params.w)
        return _combine(embeddings, _convex_weights(F.logsigmoid(pre)))
    if variant == 'naive':
        if embeddings.shape[-2] != 1:
            raise ConfigError(f'naive variant needs singleton groups, got M={embeddings.shape[-2]}')
        return embeddings[..., 0, :]
    raise ConfigError(f'unknown variant {variant!r}')


def features_of(propagated) -> torch.Tensor:
    if isinstance(propagated, PropagatedFeatures):
        return propagated.tensor
    return _rows(propagated)


def episode_logits(episode: InterpolatedEpisode, propagated, params: ParamSet, subset: str,
                   variant: str = 'full', leaky_slope: float = 0.2) -> torch.Tensor:
    """(groups, N) classifier logits for one subset of an episode."""
    if params.n_way != episode.n_way:
        raise ShapeError(f'classifier has {params.n_way} ways, episode has {episode.n_way}')
    nodes = torch.from_numpy(episode.node_matrix(subset))
    z = encode(features_of(propagated)[nodes], params.W_e)
    return classifier_logits(represent(z, params, variant, leaky_slope), params.W_c, params.b_c)


def episode_loss(episode: InterpolatedEpisode, propagated, params: ParamSet, subset: str,
                 variant: str = 'full', leaky_slope: float = 0.2) -> torch.Tensor:
    """Mean cross-entropy over the groups of `subset`."""
    logits = episode_logits(episode, propagated, params, subset, variant, leaky_slope)
    targets = torch.from_numpy(episode.targets(subset))
    return cross_entropy_from_logits(logits, targets)
