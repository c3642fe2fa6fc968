import numpy as np
import pytest

from distillkit import trainer
from distillkit.data import Dataset, synth_blobs
from distillkit.losses import LossSpec
from distillkit.nn import ModelDescriptor, build
from distillkit.optim import OptimSpec


def mlp(dim: int, k: int, hidden: int = 32) -> ModelDescriptor:
    return ModelDescriptor(arch="mlp", input_shape=(dim,), num_classes=k, widths=(dim, hidden, k))


def test_one_epoch_on_separable_blobs() -> None:
    train_set, test_set = synth_blobs(3, 1000, 8, 0.05, seed=0)
    result = trainer.train(
        build(mlp(8, 3), 0),
        train_set,
        test_set,
        LossSpec(kind="ce"),
        OptimSpec(lr0=0.1, milestones=()),
        epochs=1,
        batch_size=16,
        seed=0,
    )
    (record,) = result.history.records
    assert record.train_acc > 0.9
    assert record.test_acc > 0.9


def test_untrained_model_is_at_chance() -> None:
    k, n = 10, 2000
    rng = np.random.default_rng(4)
    dataset = Dataset(rng.normal(size=(n, 16)), rng.integers(0, k, size=n), num_classes=k, split="test")
    acc, loss = trainer.evaluate(build(mlp(16, k), 9), dataset)
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) <= 3 * sigma
    assert np.isfinite(loss)


def test_perfect_model_scores_exactly_one() -> None:
    k = 4
    model = build(ModelDescriptor(arch="mlp", input_shape=(k,), num_classes=k, widths=(k, k)), 0)
    model.params["fc0.weight"].data[...] = 10.0 * np.eye(k)
    model.params["fc0.bias"].data[...] = 0.0
    labels = np.arange(40) % k
    dataset = Dataset(np.eye(k)[labels], labels, num_classes=k, split="test")
    acc, loss = trainer.evaluate(model, dataset)
    assert acc == 1.0
    assert loss == pytest.approx(-np.log(np.exp(10.0) / (np.exp(10.0) + k - 1)), rel=1e-12)
