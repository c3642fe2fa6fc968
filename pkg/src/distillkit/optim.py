"""SGD with heavy-ball momentum and weight decay, plus step learning-rate schedules."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from distillkit.errors import NonFiniteError, ShapeError
from distillkit.tensor import Tensor


class OptimSpec(BaseModel):
    """Optimizer and step-decay schedule settings.

    Defaults follow the CIFAR recipe: lr 0.1 divided by 5 at epochs 60/120/160,
    momentum 0.9, weight decay 5e-4.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = Field(default=0.1, gt=0.0, description="Initial learning rate.")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="Heavy-ball momentum.")
    weight_decay: float = Field(
        default=5e-4, ge=0.0, description="L2 penalty added to every gradient, biases included."
    )
    milestones: tuple[int, ...] = Field(
        default=(60, 120, 160), description="Epochs at which the learning rate decays."
    )
    decay_factor: float = Field(
        default=0.2, gt=0.0, le=1.0, description="Multiplier applied at each milestone."
    )
    ref_batch: Optional[int] = Field(
        default=None,
        gt=0,
        description="If set, lr0 is scaled linearly by batch_size / ref_batch.",
    )

    @field_validator("milestones")
    @classmethod
    def _strictly_increasing(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(m < 0 for m in value):
            raise ValueError("milestones must be non-negative")
        return value

    def base_lr(self, batch_size: int) -> float:
        """Initial learning rate after optional linear batch scaling."""
        if self.ref_batch is None:
            return self.lr0
        return batch_scaled_lr(self.lr0, batch_size, self.ref_batch)


def lr_at_epoch(spec: OptimSpec, epoch: int, lr0: Optional[float] = None) -> float:
    """``lr0 * decay_factor ** (number of milestones <= epoch)``."""
    base = spec.lr0 if lr0 is None else lr0
    passed = sum(1 for m in spec.milestones if m <= epoch)
    return base * spec.decay_factor**passed


def batch_scaled_lr(lr_base: float, batch_size: int, ref_batch: int) -> float:
    """Linear scaling rule ``lr_base * batch_size / ref_batch``."""
    if batch_size <= 0 or ref_batch <= 0:
        raise ValueError("batch sizes must be positive")
    return lr_base * batch_size / ref_batch


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Apply one in-place heavy-ball update.

    ``g' = grad + weight_decay * param``; ``v <- momentum * v + g'``;
    ``param <- param - lr * v``.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must align")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"sgd_step: shapes {p.shape}, {g.shape}, {v.shape} differ")
    with np.errstate(over="ignore", invalid="ignore"):
        new_velocity = [
            momentum * v + g + weight_decay * p.data for p, g, v in zip(params, grads, velocity)
        ]
        updates = [p.data - lr * v for p, v in zip(params, new_velocity)]
    for u in updates:
        bad = u[~np.isfinite(u)]
        if bad.size:
            raise NonFiniteError("sgd_step produced a non-finite parameter", float(bad[0]))
    for p, v, new_v, update in zip(params, velocity, new_velocity, updates):
        v[...] = new_v
        p.data[...] = update


class SGD:
    """Stateful wrapper around :func:`sgd_step` with velocity initialised to zero."""

    def __init__(self, params: Sequence[Tensor], spec: OptimSpec):
        self.params = list(params)
        self.spec = spec
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step(
            self.params, grads, self.velocity, lr, self.spec.momentum, self.spec.weight_decay
        )
