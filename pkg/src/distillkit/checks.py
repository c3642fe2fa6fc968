"""Gradient-check and identity-verification suites.

Both suites return :class:`CheckResult` rows; the CLI prints them as a
pass/fail report and the tests assert on them.
"""

from __future__ import annotations

import time
from typing import Callable, Iterable

import numpy as np
from pydantic import BaseModel

from distillkit.losses import (
    combined_smoothed_target,
    cross_entropy,
    entropy,
    kd_loss,
    kl_divergence,
    lsr_loss,
    lsr_loss_direct,
    one_hot,
    soften_virtual_teacher,
    softmax_temperature,
    tf_kd_reg_loss,
    tf_kd_self_loss,
    uniform,
)
from distillkit.nn import Model, ModelDescriptor, build
from distillkit.tensor import Tensor, backward, finite_diff_gradient, log_softmax

LOSS_GRAD_TOL = 1e-5
NETWORK_GRAD_TOL = 1e-4
GRAD_CASES = 100
IDENTITY_TOL = 1e-9
EXACT_TOL = 1e-12
IDENTITY_CLASSES = (2, 5, 10, 100)
TEMPERATURE_SWEEP = (1.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1000.0)


class CheckResult(BaseModel):
    """Outcome of one check."""

    name: str
    passed: bool
    max_error: float
    tolerance: float
    cases: int
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max error {self.max_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.cases} cases, {self.seconds:.2f}s)"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, or the absolute error when both are tiny."""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    diff = float(np.linalg.norm(analytic - numeric))
    return diff if scale < 1e-12 else diff / scale


def _timed(name: str, tolerance: float, body: Callable[[], tuple[float, int]]) -> CheckResult:
    start = time.perf_counter()
    err, cases = body()
    return CheckResult(
        name=name,
        passed=bool(err <= tolerance),
        max_error=err,
        tolerance=tolerance,
        cases=cases,
        seconds=time.perf_counter() - start,
    )


############################  Gradient suite  #################################


def _logit_gradient_error(loss_fn: Callable[[Tensor], Tensor], logits: np.ndarray) -> float:
    z = Tensor(logits.copy(), requires_grad=True)
    backward(loss_fn(z))
    assert z.grad is not None
    numeric = finite_diff_gradient(loss_fn, logits).data
    return relative_error(z.grad, numeric)


def loss_gradient_cases(rng: np.random.Generator) -> dict[str, Callable[[Tensor], Tensor]]:
    """Every loss as a function of student logits, on fixed random inputs."""
    n, k = 4, 6
    y = rng.integers(0, k, size=n)
    teacher = rng.normal(size=(n, k)) * 2.0
    return {
        "ce": lambda z: cross_entropy(one_hot(y, k), log_softmax(z, axis=-1)),
        "lsr": lambda z: lsr_loss(z, y, k, alpha=0.1),
        "kd": lambda z: kd_loss(z, teacher, y, alpha=0.7, tau=4.0),
        "kd_tau_squared": lambda z: kd_loss(z, teacher, y, alpha=0.7, tau=4.0, tau_squared_scaling=True),
        "tf_self": lambda z: tf_kd_self_loss(z, teacher, y, alpha=0.95, tau=20.0),
        "tf_reg": lambda z: tf_kd_reg_loss(z, y, k, alpha=0.1, tau=20.0, a=0.99),
    }


def gradcheck_descriptors() -> dict[str, ModelDescriptor]:
    return {
        "mlp": ModelDescriptor(arch="mlp", input_shape=(5,), num_classes=3, widths=(5, 7, 3)),
        "plain_cnn": ModelDescriptor(
            arch="plain_cnn", input_shape=(2, 8, 8), num_classes=3, channels=(2, 3, 2), fc=(4,)
        ),
    }


def _network_gradient_error(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    k = model.descriptor.num_classes
    q = one_hot(y, k)
    backward(cross_entropy(q, log_softmax(model(x), axis=-1)))
    worst = 0.0
    for name, param in model.params.items():

        def loss_at(values: Tensor, name: str = name) -> Tensor:
            params = {n: (values if n == name else p.detach()) for n, p in model.params.items()}
            return cross_entropy(q, log_softmax(Model(model.descriptor, params)(x), axis=-1))

        assert param.grad is not None
        numeric = finite_diff_gradient(loss_at, param.data).data
        worst = max(worst, relative_error(param.grad, numeric))
    return worst


def _loss_gradient_errors(rng: np.random.Generator, cases: int) -> dict[str, float]:
    worst: dict[str, float] = {}
    for _ in range(cases):
        logits = rng.normal(size=(4, 6)) * 3.0
        for name, fn in loss_gradient_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), _logit_gradient_error(fn, logits))
    return worst


def run_gradcheck(seed: int = 0, cases: int = GRAD_CASES) -> list[CheckResult]:
    """Compare analytic gradients with central differences for every loss and architecture."""
    rng = np.random.default_rng(seed)
    results = []
    start = time.perf_counter()
    loss_errors = _loss_gradient_errors(rng, cases)
    per_loss = (time.perf_counter() - start) / max(len(loss_errors), 1)
    for name, err in loss_errors.items():
        results.append(
            CheckResult(
                name=f"grad/{name}",
                passed=bool(err <= LOSS_GRAD_TOL),
                max_error=err,
                tolerance=LOSS_GRAD_TOL,
                cases=cases,
                seconds=per_loss,
            )
        )
    for name, descriptor in gradcheck_descriptors().items():
        model = build(descriptor, seed)
        x = rng.normal(size=(3, *descriptor.input_shape))
        y = rng.integers(0, descriptor.num_classes, size=3)
        results.append(
            _timed(
                f"grad/{name}",
                NETWORK_GRAD_TOL,
                lambda model=model, x=x, y=y: (_network_gradient_error(model, x, y), len(model.params)),
            )
        )
    return results


############################  Identity suite  #################################


def _random_cases(rng: np.random.Generator, per_k: int) -> Iterable[tuple[np.ndarray, int, float]]:
    for k in IDENTITY_CLASSES:
        for _ in range(per_k):
            yield rng.normal(size=k) * 3.0, int(rng.integers(0, k)), float(rng.uniform(0.0, 1.0))


def check_lsr_decomposition(rng: np.random.Generator, per_k: int = 250) -> tuple[float, int]:
    """Smoothed-label cross-entropy equals ``(1-a)H(q,p) + a(KL(u,p) + H(u))``."""
    worst, n = 0.0, 0
    for z, y, alpha in _random_cases(rng, per_k):
        k = z.shape[-1]
        direct = lsr_loss_direct(z, y, k, alpha).item()
        log_p = log_softmax(z)
        decomposed = (1 - alpha) * cross_entropy(one_hot(y, k), log_p).item() + alpha * (
            kl_divergence(uniform(k), log_p).item() + entropy(uniform(k))
        )
        worst = max(worst, abs(direct - decomposed))
        n += 1
    return worst, n


def check_kd_as_learned_lsr(rng: np.random.Generator, per_k: int = 250) -> tuple[float, int]:
    """At ``tau = 1``, KD plus ``a H(p^t)`` is a cross-entropy against the mixed target."""
    worst, n = 0.0, 0
    for z, y, alpha in _random_cases(rng, per_k):
        k = z.shape[-1]
        teacher = rng.normal(size=k) * 3.0
        p_t = softmax_temperature(teacher, 1.0)
        lhs = kd_loss(z, teacher, y, alpha, tau=1.0).item() + alpha * entropy(p_t)
        rhs = cross_entropy(combined_smoothed_target(y, p_t, alpha), log_softmax(z)).item()
        worst = max(worst, abs(lhs - rhs))
        n += 1
    return worst, n


def check_lsr_is_uniform_kd(rng: np.random.Generator, per_k: int = 250) -> tuple[float, int]:
    """KD against a constant-logit teacher at ``tau = 1`` is label smoothing."""
    worst, n = 0.0, 0
    for z, y, alpha in _random_cases(rng, per_k):
        k = z.shape[-1]
        kd = kd_loss(z, np.zeros(k), y, alpha, tau=1.0).item()
        lsr = lsr_loss(z, y, k, alpha).item()
        worst = max(worst, abs(kd - lsr))
        n += 1
    return worst, n


def check_temperature_convergence(rng: np.random.Generator, vectors: int = 100) -> tuple[float, int]:
    """``KL(u, p_tau)`` never increases along the sweep and vanishes at the top.

    Returns the largest increase between consecutive temperatures, or the
    final divergence when that exceeds 1e-4 (reported as an error of 1.0).
    """
    worst = 0.0
    for _ in range(vectors):
        z = rng.uniform(-10.0, 10.0, size=10)
        u = uniform(10)
        kls = []
        for tau in TEMPERATURE_SWEEP:
            log_p = np.log(softmax_temperature(z, tau))
            kls.append(float(np.sum(u * (np.log(u) - log_p))))
        increases = [max(0.0, b - a) for a, b in zip(kls, kls[1:])]
        worst = max(worst, *increases)
        if kls[-1] >= 1e-4:
            worst = max(worst, 1.0)
    return worst, vectors


def check_virtual_teacher_argmax() -> tuple[float, int]:
    """Count label/argmax disagreements of the softened virtual teacher."""
    violations, n = 0, 0
    for k in IDENTITY_CLASSES:
        labels = np.arange(k)
        for a in (0.9, 0.99, 1.0):
            if a <= 1.0 / k:
                continue
            for tau in (1.0, 20.0, 40.0):
                p = soften_virtual_teacher(labels, k, a, tau)
                violations += int(np.sum(np.argmax(p, axis=1) != labels))
                n += k
    return float(violations), n


def run_identity_checks(seed: int = 0) -> list[CheckResult]:
    """Run every exact identity over the random case grid."""
    rng = np.random.default_rng(seed)
    return [
        _timed("identity/lsr-decomposition", IDENTITY_TOL, lambda: check_lsr_decomposition(rng)),
        _timed("identity/kd-as-learned-lsr", IDENTITY_TOL, lambda: check_kd_as_learned_lsr(rng)),
        _timed("identity/lsr-equals-uniform-kd", EXACT_TOL, lambda: check_lsr_is_uniform_kd(rng)),
        _timed("identity/temperature-convergence", EXACT_TOL, lambda: check_temperature_convergence(rng)),
        _timed("identity/virtual-teacher-argmax", 0.0, check_virtual_teacher_argmax),
    ]


def all_passed(results: Iterable[CheckResult]) -> bool:
    return all(r.passed for r in results)


def report(results: Iterable[CheckResult]) -> str:
    rows = list(results)
    passed = sum(r.passed for r in rows)
    lines = [r.line() for r in rows]
    lines.append(f"{passed}/{len(rows)} checks passed")
    return "\n".join(lines)
