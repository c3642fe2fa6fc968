"""Probability constructions and distillation losses.

Distributions (targets, teacher soft targets, virtual teachers) are plain
float64 NumPy arrays of shape ``(K,)`` or ``(N, K)``; they never carry a
gradient. Student-side quantities are :class:`~distillkit.tensor.Tensor`
log-probabilities, so every loss here is differentiable with respect to the
student logits only. Batched losses return the mean over the batch.

The KL divergence takes the reference distribution first, matching
``D_KL(p^t_tau, p_tau)``.
"""

from __future__ import annotations

from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from distillkit.errors import DomainError, ShapeError
from distillkit.tensor import (
    ArrayLike,
    Tensor,
    add,
    as_tensor,
    log_softmax,
    mul,
    reduce_mean,
    reduce_sum,
    scalar_mul,
    sub,
)

Labels = Union[int, np.ndarray, list[int]]
LossKind = Literal["ce", "lsr", "kd", "tf_self", "tf_reg"]

# Tf-KD_reg only behaves like a confident teacher for a >= 0.9.
MIN_VIRTUAL_TEACHER_A = 0.9


class LossSpec(BaseModel):
    """Which loss to train with and its hyperparameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LossKind = Field(default="ce", description="Loss function to optimise.")
    alpha: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Weight of the smoothing / distillation term."
    )
    tau: float = Field(default=1.0, gt=0.0, description="Softmax temperature.")
    a: Optional[float] = Field(
        default=None, gt=0.0, le=1.0, description="Correct-class probability of the virtual teacher."
    )
    tau_squared_scaling: bool = Field(
        default=False, description="Multiply the KL term by tau**2 (Hinton's gradient compensation)."
    )

    @model_validator(mode="after")
    def _check_virtual_teacher(self) -> "LossSpec":
        if self.kind == "tf_reg":
            if self.a is None:
                raise ValueError("tf_reg needs the virtual-teacher probability 'a'")
            if self.a < MIN_VIRTUAL_TEACHER_A:
                raise ValueError(f"tf_reg needs a >= {MIN_VIRTUAL_TEACHER_A}, got {self.a}")
        return self

    @property
    def needs_teacher(self) -> bool:
        """Whether the loss consumes teacher logits."""
        return self.kind in ("kd", "tf_self")


############################  Helpers  ########################################


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return float(tau)


def _labels(y: Labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(y)
    if not np.issubdtype(labels.dtype, np.integer):
        raise DomainError(f"labels must be integers, got dtype {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    return labels


def _values(x: ArrayLike) -> np.ndarray:
    return as_tensor(x).data


def _num_classes(logits: Tensor, num_classes: Optional[int]) -> int:
    k = logits.shape[-1]
    if num_classes is not None and num_classes != k:
        raise ShapeError(f"logits have {k} classes but K={num_classes} was given")
    return k


def _check_same_shape(target: np.ndarray, log_p: Tensor) -> None:
    if target.shape != log_p.shape:
        raise ShapeError(f"distribution shape {target.shape} does not match {log_p.shape}")


def validate_distribution(p: ArrayLike, atol: float = 1e-9) -> np.ndarray:
    """Return ``p`` as an array after checking it is a (batch of) distribution(s)."""
    probs = np.asarray(p, dtype=np.float64)
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise DomainError("not a valid probability distribution")
    return probs


def one_hot(y: Labels, num_classes: int) -> np.ndarray:
    """One-hot distribution(s) ``q`` for integer label(s) ``y``."""
    labels = _labels(y, num_classes)
    return np.eye(num_classes)[labels]


def uniform(num_classes: int, like: Optional[np.ndarray] = None) -> np.ndarray:
    """The uniform distribution ``u(k) = 1/K``, optionally shaped like ``like``."""
    shape = like.shape if like is not None else (num_classes,)
    return np.full(shape, 1.0 / num_classes)


#####################  Temperature and information measures  ##################


def softmax_temperature(logits: ArrayLike, tau: float = 1.0) -> np.ndarray:
    """Return ``softmax(z / tau)`` along the last axis as a constant distribution."""
    tau = _check_tau(tau)
    z = _values(logits) / tau
    shifted = np.exp(z - z.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def log_softmax_temperature(logits: ArrayLike, tau: float = 1.0) -> Tensor:
    """Differentiable ``log softmax(z / tau)`` along the last axis."""
    tau = _check_tau(tau)
    return log_softmax(scalar_mul(logits, 1.0 / tau), axis=-1)


def cross_entropy(q: ArrayLike, log_p: Tensor) -> Tensor:
    """Cross-entropy ``H(q, p) = -sum_k q(k) log p(k)``, averaged over the batch."""
    target = np.asarray(_values(q))
    _check_same_shape(target, log_p)
    per_row = reduce_sum(mul(Tensor(target), log_p), axis=-1)
    return scalar_mul(reduce_mean(per_row), -1.0)


def entropy(p: ArrayLike) -> float:
    """Entropy ``H(p)`` with ``0 log 0 = 0``, averaged over the batch."""
    probs = validate_distribution(_values(p))
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return float(np.mean(-(probs * logs).sum(axis=-1)))


def kl_divergence(target: ArrayLike, log_p: Tensor) -> Tensor:
    """``D_KL(target, p)``, averaged over the batch; ``target`` is held constant."""
    ref = np.asarray(_values(target))
    _check_same_shape(ref, log_p)
    neg_entropy = (ref * np.log(np.where(ref > 0, ref, 1.0))).sum(axis=-1)
    cross = reduce_sum(mul(Tensor(ref), log_p), axis=-1)
    return reduce_mean(sub(Tensor(neg_entropy), cross))


def _mix(ce: Tensor, reg: Tensor, alpha: float) -> Tensor:
    return add(scalar_mul(ce, 1.0 - alpha), scalar_mul(reg, alpha))


###########################  Label smoothing  #################################


def smoothed_labels(y: Labels, num_classes: int, alpha: float) -> np.ndarray:
    """``q'(k) = (1 - alpha) q(k) + alpha / K``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * one_hot(y, num_classes) + alpha / num_classes


def lsr_loss(
    logits: ArrayLike, y: Labels, num_classes: Optional[int] = None, alpha: float = 0.1
) -> Tensor:
    """Label-smoothing loss ``(1 - alpha) H(q, p) + alpha D_KL(u, p)``."""
    logits = as_tensor(logits)
    k = _num_classes(logits, num_classes)
    log_p = log_softmax(logits, axis=-1)
    q = one_hot(y, k)
    return _mix(cross_entropy(q, log_p), kl_divergence(uniform(k, q), log_p), alpha)


def lsr_loss_direct(
    logits: ArrayLike, y: Labels, num_classes: Optional[int] = None, alpha: float = 0.1
) -> Tensor:
    """Label smoothing written as a single cross-entropy ``H(q', p)``."""
    logits = as_tensor(logits)
    k = _num_classes(logits, num_classes)
    return cross_entropy(smoothed_labels(y, k, alpha), log_softmax(logits, axis=-1))


###########################  Knowledge distillation  ##########################


def kd_loss(
    student_logits: ArrayLike,
    teacher_logits: ArrayLike,
    y: Labels,
    alpha: float,
    tau: float,
    tau_squared_scaling: bool = False,
) -> Tensor:
    """Distillation loss ``(1 - alpha) H(q, p) + alpha D_KL(p^t_tau, p_tau)``.

    The cross-entropy term uses the unsoftened student. The teacher side never
    receives a gradient.
    """
    tau = _check_tau(tau)
    student = as_tensor(student_logits)
    teacher = _values(teacher_logits)
    if teacher.shape != student.shape:
        raise ShapeError(f"teacher logits {teacher.shape} vs student logits {student.shape}")
    k = student.shape[-1]
    ce = cross_entropy(one_hot(y, k), log_softmax(student, axis=-1))
    kl = kl_divergence(softmax_temperature(teacher, tau), log_softmax_temperature(student, tau))
    if tau_squared_scaling:
        kl = scalar_mul(kl, tau * tau)
    return _mix(ce, kl, alpha)


def combined_smoothed_target(y: Labels, teacher_probs: ArrayLike, alpha: float) -> np.ndarray:
    """``q~^t(k) = (1 - alpha) q(k) + alpha p^t(k)``."""
    probs = validate_distribution(_values(teacher_probs))
    return (1.0 - alpha) * one_hot(y, probs.shape[-1]) + alpha * probs


def tf_kd_self_loss(
    student_logits: ArrayLike,
    frozen_teacher_logits: ArrayLike,
    y: Labels,
    alpha: float,
    tau: float,
    tau_squared_scaling: bool = False,
) -> Tensor:
    """Self-distillation against a frozen pre-trained copy of the same architecture."""
    return kd_loss(student_logits, frozen_teacher_logits, y, alpha, tau, tau_squared_scaling)


###########################  Virtual teacher  ################################


def virtual_teacher(y: Labels, num_classes: int, a: float) -> np.ndarray:
    """Two-level distribution: ``a`` on the label, ``(1 - a)/(K - 1)`` elsewhere."""
    if num_classes < 2:
        raise DomainError("a virtual teacher needs at least two classes")
    if not 1.0 / num_classes < a <= 1.0:
        raise DomainError(f"a must lie in (1/K, 1] = ({1.0 / num_classes:.6g}, 1], got {a}")
    q = one_hot(y, num_classes)
    return q * a + (1.0 - q) * ((1.0 - a) / (num_classes - 1))


def soften_distribution(p: ArrayLike, tau: float) -> np.ndarray:
    """Soften a distribution as ``softmax(log(p) / tau)``; ``tau = 1`` is the identity."""
    tau = _check_tau(tau)
    probs = validate_distribution(_values(p))
    if tau == 1.0:
        return probs.copy()
    if np.any(probs <= 0):
        raise DomainError("cannot soften a distribution with zero entries at tau != 1")
    return softmax_temperature(np.log(probs), tau)


def soften_virtual_teacher(y: Labels, num_classes: int, a: float, tau: float) -> np.ndarray:
    """Temperature-softened virtual teacher; ``a = 1`` stays one-hot at every ``tau``."""
    base = virtual_teacher(y, num_classes, a)
    if a == 1.0:
        _check_tau(tau)
        return base
    return soften_distribution(base, tau)


def tf_kd_reg_loss(
    student_logits: ArrayLike,
    y: Labels,
    num_classes: Optional[int] = None,
    alpha: float = 0.1,
    tau: float = 20.0,
    a: float = 0.99,
    tau_squared_scaling: bool = False,
) -> Tensor:
    """``(1 - alpha) H(q, p) + alpha D_KL(p^d_tau, p_tau)`` against the virtual teacher."""
    student = as_tensor(student_logits)
    k = _num_classes(student, num_classes)
    teacher = soften_virtual_teacher(y, k, a, tau)
    ce = cross_entropy(one_hot(y, k), log_softmax(student, axis=-1))
    kl = kl_divergence(teacher, log_softmax_temperature(student, tau))
    if tau_squared_scaling:
        kl = scalar_mul(kl, tau * tau)
    return _mix(ce, kl, alpha)


def compute_loss(
    spec: LossSpec,
    student_logits: Tensor,
    y: Labels,
    teacher_logits: Optional[ArrayLike] = None,
) -> Tensor:
    """Evaluate the loss described by ``spec`` on one batch."""
    if spec.needs_teacher and teacher_logits is None:
        raise DomainError(f"{spec.kind} loss needs teacher logits")
    match spec.kind:
        case "ce":
            k = student_logits.shape[-1]
            return cross_entropy(one_hot(y, k), log_softmax(student_logits, axis=-1))
        case "lsr":
            return lsr_loss(student_logits, y, alpha=spec.alpha)
        case "kd":
            return kd_loss(
                student_logits, teacher_logits, y, spec.alpha, spec.tau, spec.tau_squared_scaling
            )
        case "tf_self":
            return tf_kd_self_loss(
                student_logits, teacher_logits, y, spec.alpha, spec.tau, spec.tau_squared_scaling
            )
        case "tf_reg":
            assert spec.a is not None
            return tf_kd_reg_loss(
                student_logits,
                y,
                alpha=spec.alpha,
                tau=spec.tau,
                a=spec.a,
                tau_squared_scaling=spec.tau_squared_scaling,
            )
        case _:
            raise ValueError(f"unknown loss kind: {spec.kind}")
