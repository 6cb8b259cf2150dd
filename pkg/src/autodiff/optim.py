"""SGD with momentum and L2 weight decay"""
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, Mapping, Optional

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import NumericalError, OptimizerError


@dataclass
class OptimizerState:
    """Momentum buffers keyed by parameter name.

    ``anchors`` moves the decay target of a parameter from zero to a fixed
    array, ``no_decay`` names parameters that are never decayed and
    ``max_grad_norm`` rescales the joint gradient to at most that l2 norm.
    """
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    anchors: Dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: AbstractSet[str] = frozenset()
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError(f"max_grad_norm must be positive, got {self.max_grad_norm}")

    @classmethod
    def for_parameters(cls, params: Mapping[str, Tensor], lr: float, momentum: float,
                       weight_decay: float, **options) -> "OptimizerState":
        buffers = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, buffers=buffers, **options)


def _clip_scale(params: Mapping[str, Tensor], max_norm: Optional[float]) -> float:
    if max_norm is None:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values())))
    if not np.isfinite(norm):
        raise NumericalError(f"gradient norm is not finite ({norm})")
    return min(1.0, max_norm / norm) if norm > 0 else 1.0


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """In-place update: v <- m*v + g + wd*(p - anchor) ; p <- p - lr*v

    Nothing is updated unless every parameter has a gradient.
    """
    if set(params) != set(state.buffers):
        missing = sorted(set(params) ^ set(state.buffers))
        raise OptimizerError(f"momentum buffers do not match parameters: {missing}")
    no_grad = [name for name, param in params.items() if param.grad is None]
    if no_grad:
        raise OptimizerError(f"parameter {no_grad[0]} has no gradient"
                             + (f" (and {len(no_grad) - 1} more)" if len(no_grad) > 1 else ""))

    scale = _clip_scale(params, state.max_grad_norm)
    for name, param in params.items():
        velocity = state.buffers[name]
        velocity *= state.momentum
        velocity += param.grad * scale if scale != 1.0 else param.grad
        if state.weight_decay and name not in state.no_decay:
            anchor = state.anchors.get(name)
            velocity += state.weight_decay * (param.data if anchor is None else param.data - anchor)
        param.data -= state.lr * velocity


class SGD:
    """Stateful wrapper pairing a parameter dict with its optimizer state"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 5e-4, **options):
        self.params = dict(params)
        self.state = OptimizerState.for_parameters(self.params, lr, momentum, weight_decay, **options)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.state)
