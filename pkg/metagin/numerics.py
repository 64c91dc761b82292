"""Dense numeric primitives, parameter containers and the gradient contract.

All values are float64 torch tensors. Gradients come from reverse-mode
autodiff; `numeric_gradient` is the central-difference oracle used to check
them.
"""
import math
from dataclasses import dataclass, fields
from typing import Callable, Dict, Iterator, Sequence, Tuple

import numpy as np
import torch

from .errors import DivergenceError, ShapeError

DTYPE = torch.float64
LOG_FLOOR = 1e-12

PARAM_NAMES = ('W_e', 'w', 'a', 'W_c', 'b_c')


def as_tensor(values) -> torch.Tensor:
    """Float64 tensor from array-like input; rejects NaN/Inf."""
    if isinstance(values, torch.Tensor):
        t = values.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(values, dtype=np.float64))
    if not bool(torch.isfinite(t.detach()).all()):
        raise ValueError('tensor contains non-finite values')
    return t


def softmax(logits, dim: int = -1) -> torch.Tensor:
    x = as_tensor(logits)
    if x.numel() == 0:
        raise ValueError('softmax of an empty vector')
    # torch subtracts the running max before exponentiating
    return torch.softmax(x, dim=dim)


def sigmoid(x) -> torch.Tensor:
    return torch.sigmoid(as_tensor(x))


def leaky_relu(x, slope: float = 0.2) -> torch.Tensor:
    """Leaky rectifier; the derivative at exactly 0 is taken from the positive branch."""
    x = as_tensor(x)
    return torch.where(x >= 0, x, slope * x)


def cross_entropy(probabilities, target: int) -> torch.Tensor:
    p = as_tensor(probabilities)
    if p.ndim != 1 or p.numel() == 0:
        raise ShapeError('cross_entropy expects a non-empty probability vector')
    if not 0 <= int(target) < p.numel():
        raise ShapeError(f'target {target} out of range for {p.numel()} classes')
    if abs(float(p.detach().sum()) - 1.0) > 1e-9:
        raise ValueError('probabilities must sum to 1')
    return -torch.log(torch.clamp(p[int(target)], min=LOG_FLOOR))


def cross_entropy_from_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean -log p(target) over rows, with p floored at LOG_FLOOR."""
    log_p = torch.log_softmax(logits, dim=-1)
    picked = log_p.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return -torch.clamp(picked, min=math.log(LOG_FLOOR)).mean()


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Every learnable value of the model: W_e (d x d'), w (2d'), a (2), W_c (d' x N), b_c (N)."""

    W_e: torch.Tensor
    w: torch.Tensor
    a: torch.Tensor
    W_c: torch.Tensor
    b_c: torch.Tensor

    def __post_init__(self):
        d, d_hidden = self.W_e.shape if self.W_e.ndim == 2 else (None, None)
        if d is None:
            raise ShapeError('W_e must be a matrix')
        n_way = self.b_c.shape[0] if self.b_c.ndim == 1 else None
        expected = {
            'w': (2 * d_hidden,),
            'a': (2,),
            'W_c': (d_hidden, n_way),
            'b_c': (n_way,),
        }
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ShapeError(f'{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}')

    @property
    def d(self) -> int:
        return int(self.W_e.shape[0])

    @property
    def d_hidden(self) -> int:
        return int(self.W_e.shape[1])

    @property
    def n_way(self) -> int:
        return int(self.b_c.shape[0])

    def tensors(self) -> Tuple[torch.Tensor, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.items()}

    @property
    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors())

    @classmethod
    def from_tensors(cls, tensors: Sequence[torch.Tensor]) -> 'ParamSet':
        return cls(*tensors)

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> 'ParamSet':
        return ParamSet.from_tensors([fn(t) for t in self.tensors()])

    def detach(self) -> 'ParamSet':
        return self.map(lambda t: t.detach().clone())

    def requires_grad_(self) -> 'ParamSet':
        """Fresh leaf copy that tracks gradients."""
        return self.map(lambda t: t.detach().clone().requires_grad_(True))

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors()])

    @classmethod
    def unflatten(cls, vector: torch.Tensor, shapes: Dict[str, Tuple[int, ...]]) -> 'ParamSet':
        parts, offset = [], 0
        for name in PARAM_NAMES:
            shape = shapes[name]
            size = int(np.prod(shape)) if shape else 1
            parts.append(vector[offset:offset + size].reshape(shape))
            offset += size
        if offset != vector.numel():
            raise ShapeError(f'vector has {vector.numel()} values, shapes need {offset}')
        return cls.from_tensors(parts)

    def step(self, grads: 'ParamSet', lr: float, only: Sequence[str] = PARAM_NAMES) -> 'ParamSet':
        """theta - lr * grads, restricted to the named components."""
        return ParamSet.from_tensors([
            t - lr * g if name in only else t
            for (name, t), g in zip(self.items(), grads.tensors())
        ])

    def dot(self, other: 'ParamSet') -> float:
        return float(sum((x.detach() * y.detach()).sum() for x, y in zip(self.tensors(), other.tensors())))

    def with_head(self, W_c: torch.Tensor, b_c: torch.Tensor) -> 'ParamSet':
        return ParamSet(self.W_e, self.w, self.a, W_c, b_c)


# Gradients share ParamSet's shape and layout.
GradientSet = ParamSet


def zeros_like(params: ParamSet) -> ParamSet:
    return params.map(lambda t: torch.zeros_like(t.detach()))


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> torch.Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.from_numpy(rng.uniform(-limit, limit, size=shape))


def init_params(d: int, d_hidden: int, n_way: int, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform W_e, w, a, W_c; zero b_c."""
    return ParamSet(
        W_e=_glorot(rng, (d, d_hidden), d, d_hidden),
        w=_glorot(rng, (2 * d_hidden,), 2 * d_hidden, 1),
        a=_glorot(rng, (2,), 2, 1),
        W_c=_glorot(rng, (d_hidden, n_way), d_hidden, n_way),
        b_c=torch.zeros(n_way, dtype=DTYPE),
    )


def init_head(d_hidden: int, n_way: int, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    return _glorot(rng, (d_hidden, n_way), d_hidden, n_way), torch.zeros(n_way, dtype=DTYPE)


def grad_of(loss: torch.Tensor, params: ParamSet, create_graph: bool = False) -> ParamSet:
    """d loss / d params for params already on the autograd tape."""
    if not bool(torch.isfinite(loss.detach())):
        raise DivergenceError(f'non-finite loss {float(loss.detach())}')
    if not loss.requires_grad:
        return zeros_like(params)
    tracked = [t for t in params.tensors() if t.requires_grad]
    grads = iter(torch.autograd.grad(loss, tracked, create_graph=create_graph, allow_unused=True)) if tracked else iter(())
    out = []
    for t in params.tensors():
        g = next(grads) if t.requires_grad else None
        out.append(torch.zeros_like(t) if g is None else g)
    return ParamSet.from_tensors(out)


def gradient(loss_function: Callable[[ParamSet], torch.Tensor], params: ParamSet) -> GradientSet:
    """Exact partials of a deterministic scalar loss at `params`."""
    leaves = params.requires_grad_()
    loss = loss_function(leaves)
    return grad_of(loss, leaves).detach()


def numeric_gradient(loss_function: Callable[[ParamSet], torch.Tensor], params: ParamSet,
                     step: float = 1e-5) -> GradientSet:
    shapes = params.shapes()
    base = params.flatten().detach().clone()
    out = torch.zeros_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            plus = base.clone()
            plus[i] += step
            minus = base.clone()
            minus[i] -= step
            f_plus = float(loss_function(ParamSet.unflatten(plus, shapes)))
            f_minus = float(loss_function(ParamSet.unflatten(minus, shapes)))
            out[i] = (f_plus - f_minus) / (2.0 * step)
    return ParamSet.unflatten(out, shapes)


def max_relative_error(analytic: ParamSet, numeric: ParamSet, floor: float = 1e-8) -> float:
    """Largest componentwise relative error over components with |numeric| > floor."""
    a = analytic.flatten().detach()
    n = numeric.flatten().detach()
    mask = n.abs() > floor
    if not bool(mask.any()):
        return 0.0
    return float(((a[mask] - n[mask]).abs() / n[mask].abs()).max())
