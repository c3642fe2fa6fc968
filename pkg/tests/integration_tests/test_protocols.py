import pickle

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from distillkit import trainer
from distillkit.errors import DomainError, NonFiniteError, TrainingDivergedError
from distillkit.losses import LossSpec
from distillkit.nn import ModelDescriptor, build, load_checkpoint, save_checkpoint
from distillkit.optim import OptimSpec
from distillkit.state import TeacherSource
from distillkit.utils import split_seed


def data(cfg):
    return cfg.dataset.load(split_seed(0).data)


def test_baseline_is_deterministic(tiny_config) -> None:
    cfg = tiny_config()
    first = trainer.run_baseline(cfg, 0, *data(cfg))
    second = trainer.run_baseline(cfg, 0, *data(cfg))
    assert first.history.deterministic_view() == second.history.deterministic_view()
    assert first.final.to_bytes() == second.final.to_bytes()
    assert len(first.history.records) == cfg.training.epochs
    other = trainer.run_baseline(cfg, 1, *data(cfg))
    assert other.final.to_bytes() != first.final.to_bytes()


def test_zero_learning_rate_keeps_initial_weights(tiny_config) -> None:
    cfg = tiny_config()
    cfg = cfg.model_copy(update={"optim": OptimSpec.model_construct(lr0=0.0)})
    result = trainer.run_baseline(cfg, 0, *data(cfg))
    initial = build(cfg.model.to_descriptor(), split_seed(0).init)
    for name, values in result.final.params.items():
        assert_array_equal(values, initial.params[name].data.astype("<f4"))


def test_alpha_zero_distillation_reproduces_baseline(tiny_config, tmp_path) -> None:
    cfg = tiny_config()
    train_set, test_set = data(cfg)
    baseline = trainer.run_baseline(cfg, 0, train_set, test_set)
    teacher_path = save_checkpoint(trainer.run_baseline(cfg, 5, train_set, test_set).final, tmp_path / "t.ckpt")

    kd_cfg = tiny_config(protocol="kd", loss={"alpha": 0.0}, teacher={"checkpoint": str(teacher_path)})
    kd = trainer.run_normal_kd(kd_cfg, 0, train_set, test_set)
    assert kd.history.deterministic_view() == baseline.history.deterministic_view()
    assert kd.history.teacher == "t"


def test_teacher_is_never_updated(tiny_config) -> None:
    cfg = tiny_config()
    train_set, test_set = data(cfg)
    teacher = build(cfg.model.to_descriptor(), 11)
    before = {name: p.data.tobytes() for name, p in teacher.params.items()}
    trainer.train(
        build(cfg.model.to_descriptor(), 12),
        train_set,
        test_set,
        LossSpec(kind="kd", alpha=0.9, tau=4.0),
        cfg.optim,
        epochs=2,
        batch_size=16,
        seed=0,
        teacher=teacher,
    )
    assert {name: p.data.tobytes() for name, p in teacher.params.items()} == before
    assert all(p.grad is None for p in teacher.params.values())


def test_identical_teacher_starts_with_zero_kl(tiny_config) -> None:
    cfg = tiny_config()
    train_set, test_set = data(cfg)
    model = build(cfg.model.to_descriptor(), 3)
    twin = build(cfg.model.to_descriptor(), 3)
    spec = LossSpec(kind="kd", alpha=1.0, tau=1.0)
    result = trainer.train(
        model,
        train_set,
        test_set,
        spec,
        OptimSpec.model_construct(lr0=0.0),
        epochs=1,
        batch_size=len(train_set),
        seed=0,
        teacher=twin,
    )
    assert result.history.records[0].train_loss == pytest.approx(0.0, abs=1e-12)


def test_snapshots_include_initial_weights(tiny_config) -> None:
    cfg = tiny_config(training={"snapshot_epochs": [0, 2]})
    result = trainer.run_baseline(cfg, 0, *data(cfg))
    assert sorted(result.snapshots) == [0, 2]
    initial = build(cfg.model.to_descriptor(), split_seed(0).init)
    assert_array_equal(result.snapshots[0].params["fc0.weight"], initial.params["fc0.weight"].data.astype("<f4"))
    assert result.snapshots[2].epoch == 2


def test_de_kd_records_teacher_accuracy(tiny_config, tmp_path) -> None:
    cfg = tiny_config(training={"snapshot_epochs": [0, 1]})
    train_set, test_set = data(cfg)
    source = trainer.run_baseline(cfg, 1, train_set, test_set)
    paths = [
        save_checkpoint(source.snapshots[e], tmp_path / f"baseline-snapshot-e{e}.ckpt") for e in (0, 1)
    ]
    dekd_cfg = tiny_config(protocol="de-kd", loss={"alpha": 0.95}, teacher={"checkpoints": [str(p) for p in paths]})
    results = trainer.de_kd_curve(dekd_cfg, 0, train_set, test_set)
    assert [r.history.method for r in results] == ["de-kd@baseline-snapshot-e0", "de-kd@baseline-snapshot-e1"]
    for path, result in zip(paths, results):
        expected, _ = trainer.evaluate(load_checkpoint(path), test_set)
        assert result.history.teacher_acc == expected


def test_re_kd_trains_the_larger_model(tiny_config, tmp_path) -> None:
    cfg = tiny_config()
    train_set, test_set = data(cfg)
    small = save_checkpoint(trainer.run_baseline(cfg, 0, train_set, test_set).final, tmp_path / "small.ckpt")
    big_cfg = tiny_config(
        protocol="re-kd",
        model={"widths": [4, 32, 16, 3]},
        teacher={"checkpoint": str(small)},
    )
    result = trainer.run_re_kd(big_cfg, 0, train_set, test_set)
    assert result.history.method == "re-kd"
    assert result.final.descriptor.widths == (4, 32, 16, 3)


def test_tf_reg_builds_only_the_student(tiny_config, monkeypatch) -> None:
    cfg = tiny_config(protocol="tf-reg", loss={"alpha": 0.1, "tau": 20.0, "a": 0.99})
    built = []
    real_build = trainer.build

    def counting_build(descriptor, seed):
        built.append(descriptor)
        return real_build(descriptor, seed)

    def no_teacher(*args, **kwargs):
        raise AssertionError("tf-reg must not load a teacher")

    monkeypatch.setattr(trainer, "build", counting_build)
    monkeypatch.setattr(trainer, "load_checkpoint", no_teacher)
    result = trainer.run_tf_reg(cfg, 0, *data(cfg))
    assert len(built) == 1
    assert result.history.method == "tf-reg"


def test_tf_reg_degenerate_teacher_is_cross_entropy(tiny_config) -> None:
    cfg = tiny_config()
    train_set, test_set = data(cfg)
    baseline = trainer.run_baseline(cfg, 0, train_set, test_set)
    reg_cfg = tiny_config(protocol="tf-reg", loss={"alpha": 1.0, "tau": 1.0, "a": 1.0})
    reg = trainer.run_tf_reg(reg_cfg, 0, train_set, test_set)
    for got, want in zip(reg.history.deterministic_view(), baseline.history.deterministic_view()):
        assert got == pytest.approx(want, abs=1e-9)


def test_tf_self_alpha_zero_is_a_fresh_baseline(tiny_config) -> None:
    cfg = tiny_config(protocol="tf-self", loss={"alpha": 0.0, "tau": 20.0})
    stage1, distilled = trainer.run_tf_self(cfg, 0, *data(cfg))
    assert distilled.history.deterministic_view() == stage1.history.deterministic_view()
    assert distilled.history.teacher == "stage1-seed0"


def test_tf_self_reuses_stage1(tiny_config, tmp_path, monkeypatch) -> None:
    cfg = tiny_config(protocol="tf-self", loss={"alpha": 0.95, "tau": 20.0}, tf_self={"stage1_seed": 0})
    calls = []
    real_baseline = trainer.run_baseline

    def counting_baseline(*args, **kwargs):
        calls.append(args[1])
        return real_baseline(*args, **kwargs)

    monkeypatch.setattr(trainer, "run_baseline", counting_baseline)
    train_set, test_set = data(cfg)
    cache = tmp_path / "cache"
    first = trainer.run_tf_self(cfg, 0, train_set, test_set, cache_dir=cache)
    trainer.run_tf_self(cfg, 1, train_set, test_set, cache_dir=cache)
    assert calls == [0]
    assert len(list(cache.glob("stage1-*.ckpt"))) == 1

    trainer.clear_stage1_cache()
    from_disk, _ = trainer.run_tf_self(cfg, 2, train_set, test_set, cache_dir=cache)
    assert calls == [0]
    assert from_disk.final.to_bytes() == first[0].final.to_bytes()


def test_tf_self_stage1_cache_follows_the_data(tiny_config, tmp_path) -> None:
    cfg = tiny_config(
        protocol="tf-self",
        dataset={"seed": None},
        loss={"alpha": 0.95, "tau": 20.0},
        tf_self={"stage1_seed": 0},
    )
    cache = tmp_path / "cache"

    def seed_data(seed: int):
        return cfg.dataset.load(split_seed(seed).data)

    trainer.run_tf_self(cfg, 0, *seed_data(0), cache_dir=cache)
    after_seed0 = trainer.run_tf_self(cfg, 1, *seed_data(1), cache_dir=cache)

    trainer.clear_stage1_cache()
    alone = trainer.run_tf_self(cfg, 1, *seed_data(1), cache_dir=tmp_path / "fresh")
    for got, want in zip(after_seed0, alone):
        assert got.history.deterministic_view() == want.history.deterministic_view()
    assert len(list(cache.glob("stage1-*.ckpt"))) == 2


def test_tf_self_finetune_starts_from_stage1(tiny_config) -> None:
    cfg = tiny_config(
        protocol="tf-self",
        loss={"alpha": 0.5, "tau": 4.0},
        tf_self={"finetune": True},
    )
    frozen_cfg = cfg.model_copy(update={"optim": OptimSpec.model_construct(lr0=0.0)})
    stage1, distilled = trainer.run_tf_self(frozen_cfg, 0, *data(cfg))
    for name, values in distilled.final.params.items():
        assert_array_equal(values, stage1.final.params[name])


def test_divergence_is_reported(tiny_config) -> None:
    cfg = tiny_config(optim={"lr0": 1e150, "milestones": [], "decay_factor": 1.0, "weight_decay": 0.1})
    with pytest.raises(TrainingDivergedError) as excinfo:
        trainer.run_baseline(cfg, 0, *data(cfg))
    assert not np.isfinite(excinfo.value.value)
    assert excinfo.value.loss_kind == cfg.loss.loss_spec("baseline").kind


def test_divergence_carries_the_offending_value(tiny_config, monkeypatch) -> None:
    cfg = tiny_config()

    def overflowing_loss(*args, **kwargs):
        raise NonFiniteError("non-finite value produced by log_softmax", float("-inf"))

    monkeypatch.setattr(trainer, "compute_loss", overflowing_loss)
    with pytest.raises(TrainingDivergedError) as excinfo:
        trainer.run_baseline(cfg, 0, *data(cfg))
    err = excinfo.value
    assert (err.epoch, err.batch, err.value) == (0, 0, float("-inf"))
    assert "-inf" in str(err)
    again = pickle.loads(pickle.dumps(err))
    assert (again.epoch, again.batch, again.loss_kind, again.value) == (0, 0, err.loss_kind, float("-inf"))


def test_evaluate_rejects_out_of_range_labels(tiny_config) -> None:
    cfg = tiny_config()
    train_set, _ = data(cfg)
    small = build(
        ModelDescriptor(arch="mlp", input_shape=(4,), num_classes=2, widths=(4, 2)), 0
    )
    with pytest.raises(DomainError):
        trainer.evaluate(small, train_set)


def test_load_teacher_sources() -> None:
    assert trainer.load_teacher(TeacherSource(kind="virtual", a=0.99)) is None
    assert trainer.load_teacher(TeacherSource()) is None
    with pytest.raises(ValueError):
        trainer.load_teacher(TeacherSource(kind="self"))
