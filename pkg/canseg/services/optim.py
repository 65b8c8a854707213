"""Poly learning-rate schedule and momentum SGD."""

from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from canseg.core.errors import ConfigError, ContainerError, ShapeError
from canseg.models.schemas import TrainSchedule
from canseg.tensor.tensor import Tensor


def poly_lr(iteration: int, sched: TrainSchedule) -> float:
    """base_lr * (1 - (iter/max_iter) ** power), and 0 from max_iter on."""
    if iteration < 0:
        raise ConfigError(f"iteration must be non-negative, got {iteration}", path="iteration")
    if iteration >= sched.max_iter:
        return 0.0
    return sched.base_lr * (1.0 - (iteration / sched.max_iter) ** sched.power)


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """One momentum step: v <- momentum*v + (g + wd*p); p <- p - lr*v. Returns (params, velocities)."""
    if not len(params) == len(grads) == len(velocities):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(velocities)} velocities")
    new_params, new_velocities = [], []
    for k, (p, g, v) in enumerate(zip(params, grads, velocities)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {k}: shape {p.shape}, grad {g.shape}, velocity {v.shape}")
        dtype = p.dtype.type
        v = dtype(momentum) * v + (g + dtype(weight_decay) * p)
        new_velocities.append(v.astype(p.dtype))
        new_params.append((p - dtype(lr) * v).astype(p.dtype))
    return new_params, new_velocities


class SGD:
    """Momentum SGD over named parameters; velocities start at zero and are checkpointable."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.names = [name for name, _ in named_params]
        self.params = [p for _, p in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        updated, self.velocities = sgd_step(
            [p.data for p in self.params], grads, self.velocities, lr, self.momentum, self.weight_decay
        )
        for p, data in zip(self.params, updated):
            p.data = data

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{name}": v for name, v in zip(self.names, self.velocities)}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        for name in arrays:
            if name not in expected:
                raise ContainerError("unknown velocity", tensor=name)
        loaded: List[Optional[np.ndarray]] = []
        for name, v in expected.items():
            if name not in arrays:
                raise ContainerError("missing velocity", tensor=name)
            src = np.asarray(arrays[name])
            if src.shape != v.shape:
                raise ContainerError(f"shape {src.shape} does not match expected {v.shape}", tensor=name)
            loaded.append(src.astype(v.dtype).copy())
        self.velocities = loaded
