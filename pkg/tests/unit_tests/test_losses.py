import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from distillkit.errors import DomainError
from distillkit.losses import (
    LossSpec,
    combined_smoothed_target,
    compute_loss,
    cross_entropy,
    entropy,
    kd_loss,
    kl_divergence,
    lsr_loss,
    lsr_loss_direct,
    one_hot,
    smoothed_labels,
    soften_distribution,
    soften_virtual_teacher,
    softmax_temperature,
    tf_kd_reg_loss,
    tf_kd_self_loss,
    uniform,
    virtual_teacher,
)
from distillkit.tensor import Tensor, backward, finite_diff_gradient, log_softmax


def test_softmax_temperature() -> None:
    assert_allclose(softmax_temperature([1.0, 2.0, 3.0], 1.0), [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    assert_allclose(softmax_temperature([1.0, 2.0, 3.0], 1e6), np.full(3, 1 / 3), atol=1e-6)
    with pytest.raises(DomainError):
        softmax_temperature([1.0, 2.0], 0.0)


def test_cross_entropy_entropy_kl_examples() -> None:
    uniform_logits = np.zeros(10)
    assert math.isclose(
        cross_entropy(one_hot(3, 10), log_softmax(uniform_logits)).item(), math.log(10), rel_tol=1e-12
    )
    q = np.array([0.5, 0.5])
    log_p = Tensor(np.log([0.25, 0.75]))
    assert cross_entropy(q, log_p).item() == pytest.approx(0.836988, abs=1e-6)
    assert kl_divergence(q, log_p).item() == pytest.approx(0.143841, abs=1e-6)
    assert entropy(uniform(100)) == pytest.approx(math.log(100), abs=1e-12)
    assert entropy(one_hot(1, 4)) == 0.0
    assert entropy([0.9, 0.1]) == pytest.approx(0.325083, abs=1e-6)


def test_smoothed_labels() -> None:
    assert_allclose(smoothed_labels(2, 5, 0.1), [0.02, 0.02, 0.92, 0.02, 0.02], atol=1e-15)
    assert_allclose(smoothed_labels(0, 3, 0.0), one_hot(0, 3))
    assert_allclose(smoothed_labels(0, 4, 1.0), uniform(4))
    with pytest.raises(DomainError):
        smoothed_labels(0, 4, 1.5)


def test_lsr_loss() -> None:
    rng = np.random.default_rng(0)
    z = rng.normal(size=(8, 10))
    y = rng.integers(0, 10, size=8)
    plain = cross_entropy(one_hot(y, 10), log_softmax(z)).item()
    assert lsr_loss(z, y, 10, alpha=0.0).item() == pytest.approx(plain, abs=1e-12)
    assert lsr_loss(z, y, 10, 0.1).item() + 0.1 * entropy(uniform(10)) == pytest.approx(
        lsr_loss_direct(z, y, 10, 0.1).item(), abs=1e-9
    )
    assert lsr_loss(np.zeros((3, 10)), [0, 1, 2], 10, 0.3).item() == pytest.approx(math.log(10), abs=1e-12)


def test_kd_loss_special_cases() -> None:
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 5))
    t = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, size=6)
    plain = cross_entropy(one_hot(y, 5), log_softmax(z)).item()
    assert kd_loss(z, t, y, alpha=0.0, tau=4.0).item() == pytest.approx(plain, abs=1e-12)
    assert kd_loss(z, np.zeros((6, 5)), y, 0.4, 1.0).item() == pytest.approx(
        lsr_loss(z, y, 5, 0.4).item(), abs=1e-12
    )
    p_t = softmax_temperature(t, 1.0)
    assert kd_loss(z, t, y, 0.4, 1.0).item() + 0.4 * entropy(p_t) == pytest.approx(
        cross_entropy(combined_smoothed_target(y, p_t, 0.4), log_softmax(z)).item(), abs=1e-9
    )
    with pytest.raises(DomainError):
        kd_loss(z, t, y, 0.4, -1.0)


def test_tau_squared_scaling_multiplies_the_kl_term() -> None:
    rng = np.random.default_rng(2)
    z, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 0])
    ce = kd_loss(z, t, y, 0.0, 3.0).item()
    kl_only = kd_loss(z, t, y, 1.0, 3.0).item()
    scaled = kd_loss(z, t, y, 0.5, 3.0, tau_squared_scaling=True).item()
    assert scaled == pytest.approx(0.5 * ce + 0.5 * 9.0 * kl_only, abs=1e-12)


def test_teacher_logits_receive_no_gradient() -> None:
    z = Tensor(np.array([[0.2, -0.3, 1.0]]), requires_grad=True)
    teacher = Tensor(np.array([[1.0, 0.0, 0.0]]), requires_grad=True)
    backward(kd_loss(z, teacher, [0], 0.5, 2.0))
    assert z.grad is not None
    assert teacher.grad is None


def test_combined_smoothed_target() -> None:
    assert_allclose(combined_smoothed_target(0, [0.6, 0.4], 0.5), [0.8, 0.2])
    assert_allclose(combined_smoothed_target(1, [0.6, 0.4], 0.0), [0.0, 1.0])
    assert_allclose(combined_smoothed_target(1, [0.6, 0.4], 1.0), [0.6, 0.4])


def test_virtual_teacher() -> None:
    p = virtual_teacher(6, 10, 0.9)
    assert p[6] == pytest.approx(0.9)
    assert_allclose(np.delete(p, 6), np.full(9, 0.1 / 9))
    assert virtual_teacher(0, 100, 0.99)[1] == pytest.approx(1.0101e-4, rel=1e-4)
    assert_allclose(virtual_teacher(2, 4, 1.0), one_hot(2, 4))
    with pytest.raises(DomainError):
        virtual_teacher(0, 10, 0.1)
    with pytest.raises(DomainError):
        virtual_teacher(0, 1, 1.0)


def test_soften_distribution() -> None:
    p = virtual_teacher(3, 10, 0.9)
    assert_allclose(soften_distribution(p, 1.0), p, atol=1e-12)
    soft = soften_distribution(p, 20.0)
    assert soft[3] / soft[0] == pytest.approx((0.9 / (0.1 / 9)) ** (1 / 20), rel=1e-9)
    assert soft[3] / soft[0] == pytest.approx(1.2454, abs=1e-4)
    assert np.argmax(soft) == 3
    assert_allclose(soften_distribution(p, 1e6), np.full(10, 0.1), atol=1e-4)
    with pytest.raises(DomainError):
        soften_distribution(one_hot(0, 3), 2.0)


def test_soften_virtual_teacher_keeps_one_hot_fixed() -> None:
    assert_allclose(soften_virtual_teacher([1, 2], 5, 1.0, 40.0), one_hot([1, 2], 5))
    with pytest.raises(DomainError):
        soften_virtual_teacher(1, 5, 1.0, 0.0)


def test_tf_kd_self_matches_kd() -> None:
    rng = np.random.default_rng(3)
    z, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    assert tf_kd_self_loss(z, t, y, 0.95, 20.0).item() == kd_loss(z, t, y, 0.95, 20.0).item()
    plain = cross_entropy(one_hot(y, 4), log_softmax(z)).item()
    assert tf_kd_self_loss(z, z, y, 0.7, 5.0).item() == pytest.approx(0.3 * plain, abs=1e-12)


def test_tf_kd_reg_loss() -> None:
    z = np.random.default_rng(4).normal(size=(3, 6))
    y = [0, 4, 5]
    plain = cross_entropy(one_hot(y, 6), log_softmax(z)).item()
    assert tf_kd_reg_loss(z, y, 6, alpha=1.0, tau=1.0, a=1.0).item() == pytest.approx(plain, abs=1e-12)

    # Uniform student against the two-level teacher: KL(p^d_tau, u) = log K - H(p^d_tau).
    k, a, tau, alpha = 10, 0.99, 20.0, 0.1
    off = (1 - a) / (k - 1)
    ratio = (a / off) ** (1 / tau)
    peak = ratio / (ratio + k - 1)
    rest = 1 / (ratio + k - 1)
    h_teacher = -(peak * math.log(peak) + (k - 1) * rest * math.log(rest))
    expected = (1 - alpha) * math.log(k) + alpha * (math.log(k) - h_teacher)
    got = tf_kd_reg_loss(np.zeros((1, k)), [7], k, alpha=alpha, tau=tau, a=a).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_loss_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(5)
    for _ in range(20):
        z = rng.normal(size=(3, 5)) * 2
        t = rng.normal(size=(3, 5)) * 2
        y = rng.integers(0, 5, size=3)
        for fn in (
            lambda s: lsr_loss(s, y, 5, 0.1),
            lambda s: kd_loss(s, t, y, 0.6, 3.0, tau_squared_scaling=True),
            lambda s: tf_kd_reg_loss(s, y, 5, 0.1, 20.0, 0.99),
        ):
            x = Tensor(z, requires_grad=True)
            backward(fn(x))
            numeric = finite_diff_gradient(fn, z).data
            assert_allclose(x.grad, numeric, rtol=1e-5, atol=1e-8)


def test_loss_spec_validation() -> None:
    with pytest.raises(ValidationError):
        LossSpec(kind="tf_reg", alpha=0.1, tau=20.0)
    with pytest.raises(ValidationError):
        LossSpec(kind="tf_reg", alpha=0.1, tau=20.0, a=0.5)
    with pytest.raises(ValidationError):
        LossSpec(kind="kd", alpha=1.5)
    assert LossSpec(kind="kd").needs_teacher
    assert not LossSpec(kind="tf_reg", a=0.99).needs_teacher


def test_compute_loss_dispatch() -> None:
    z = Tensor(np.random.default_rng(6).normal(size=(2, 3)))
    y = np.array([0, 2])
    assert compute_loss(LossSpec(kind="lsr", alpha=0.2), z, y).item() == lsr_loss(z, y, 3, 0.2).item()
    with pytest.raises(DomainError):
        compute_loss(LossSpec(kind="kd", alpha=0.5), z, y)
