import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from distillkit import presets
from distillkit.errors import NonFiniteError, ShapeError
from distillkit.optim import SGD, OptimSpec, batch_scaled_lr, lr_at_epoch, sgd_step
from distillkit.tensor import Tensor


def test_step_schedule() -> None:
    spec = OptimSpec(lr0=0.1, milestones=(60, 120, 160), decay_factor=0.2)
    assert lr_at_epoch(spec, 0) == pytest.approx(0.1)
    assert lr_at_epoch(spec, 59) == pytest.approx(0.1)
    assert lr_at_epoch(spec, 60) == pytest.approx(0.02)
    assert lr_at_epoch(spec, 120) == pytest.approx(0.004)
    assert lr_at_epoch(spec, 200, lr0=1.0) == pytest.approx(0.008)


def test_batch_scaling() -> None:
    assert batch_scaled_lr(0.1, 128, 128) == pytest.approx(0.1)
    assert batch_scaled_lr(0.1, 64, 128) == pytest.approx(0.05)
    assert batch_scaled_lr(0.1, 256, 256) == pytest.approx(0.1)
    assert OptimSpec(lr0=0.1, ref_batch=128).base_lr(64) == pytest.approx(0.05)
    assert OptimSpec(lr0=0.1).base_lr(64) == 0.1
    with pytest.raises(ValueError):
        batch_scaled_lr(0.1, 0, 128)


def test_spec_validation() -> None:
    with pytest.raises(ValidationError):
        OptimSpec(milestones=(30, 20))
    with pytest.raises(ValidationError):
        OptimSpec(lr0=0.0)
    with pytest.raises(ValidationError):
        OptimSpec(momentum=1.0)


def test_sgd_step_updates_in_place() -> None:
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    v = np.zeros(2)
    sgd_step([p], [np.array([0.5, 0.5])], [v], lr=0.1, momentum=0.9, weight_decay=0.1)
    # g' = g + wd * p = [0.6, 0.3]; v = g'; p -= lr * v
    assert_allclose(v, [0.6, 0.3])
    assert_allclose(p.data, [0.94, -2.03])
    sgd_step([p], [np.zeros(2)], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
    assert_allclose(v, [0.54, 0.27])
    with pytest.raises(ShapeError):
        sgd_step([p], [np.zeros(3)], [v], 0.1, 0.9, 0.0)


def test_zero_lr_leaves_parameters_unchanged() -> None:
    p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    before = p.data.copy()
    opt = SGD([p], OptimSpec(weight_decay=5e-4))
    p.grad = np.array([10.0, -4.0, 1.0])
    opt.step(0.0)
    assert_allclose(p.data, before, rtol=0, atol=0)


def test_sgd_zero_grad() -> None:
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    SGD([p], OptimSpec()).zero_grad()
    assert_allclose(p.grad, [0.0, 0.0])


def test_schedule_is_nonincreasing() -> None:
    for spec in (
        OptimSpec(),
        OptimSpec(milestones=(0, 3, 4), decay_factor=0.5),
        OptimSpec(milestones=(20, 30), decay_factor=1.0),
    ):
        lrs = [lr_at_epoch(spec, e) for e in range(200)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValidationError):
        OptimSpec(decay_factor=1.5)


def test_no_milestones_is_constant() -> None:
    spec = OptimSpec(lr0=0.05, milestones=())
    assert {lr_at_epoch(spec, e) for e in range(100)} == {0.05}


def test_tiny_imagenet_recipe_divides_by_ten() -> None:
    cfg = presets.preset("kd-tiny-imagenet-resnet18-mobilenetv2")
    spec = cfg.optim
    assert spec.decay_factor == pytest.approx(0.1)
    base = spec.base_lr(cfg.training.batch_size)
    first = spec.milestones[0]
    assert lr_at_epoch(spec, first - 1, base) == pytest.approx(base)
    assert lr_at_epoch(spec, first, base) == pytest.approx(base / 10)


def test_momentum_converges_on_a_quadratic() -> None:
    # f(x) = 0.5 x'Ax - b'x, minimum at A^-1 b
    a = np.diag([1.0, 10.0])
    b = np.array([1.0, -2.0])
    x = Tensor(np.array([5.0, 5.0]), requires_grad=True)
    v = np.zeros(2)
    for _ in range(200):
        sgd_step([x], [a @ x.data - b], [v], lr=0.05, momentum=0.9, weight_decay=0.0)
    assert_allclose(x.data, np.linalg.solve(a, b), atol=1e-3)


def test_non_finite_step_leaves_state_untouched() -> None:
    first = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    second = Tensor(np.array([1e308]), requires_grad=True)
    velocity = [np.array([0.1, 0.2]), np.zeros(1)]
    grads = [np.array([0.5, 0.5]), np.array([-1e308])]
    with pytest.raises(NonFiniteError) as excinfo:
        sgd_step([first, second], grads, velocity, lr=1.0, momentum=0.9, weight_decay=0.0)
    assert excinfo.value.value == np.inf
    assert_allclose(first.data, [1.0, 2.0], rtol=0, atol=0)
    assert_allclose(second.data, [1e308], rtol=0, atol=0)
    assert_allclose(velocity[0], [0.1, 0.2], rtol=0, atol=0)
    assert_allclose(velocity[1], [0.0], rtol=0, atol=0)
