"""Training and evaluation loops plus the distillation protocols.

Functions:
    evaluate: Top-1 accuracy and mean cross-entropy of a model on a dataset.
    train: SGD training with an optional frozen teacher and epoch snapshots.
    load_teacher: Resolve a TeacherSource into a frozen model (or none).
    run_baseline: Cross-entropy (or label smoothing) training from scratch.
    run_normal_kd: Distil a student from a frozen teacher checkpoint.
    run_re_kd: Distil a larger model from a smaller checkpoint.
    run_de_kd: Distil a student from a poorly-trained snapshot teacher.
    de_kd_curve: Run De-KD once per snapshot teacher.
    run_tf_self: Pre-train, then distil the same architecture from itself.
    run_tf_reg: Train against the virtual teacher; no teacher model exists.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from pathlib import Path
from typing import Optional, Sequence, Union

import msgspec
import numpy as np

from distillkit.configuration import ExperimentConfig
from distillkit.data import Dataset, batches
from distillkit.errors import (
    CheckpointError,
    DomainError,
    NonFiniteError,
    ShapeError,
    TrainingDivergedError,
)
from distillkit.losses import LossSpec, compute_loss, cross_entropy, one_hot
from distillkit.nn import (
    Checkpoint,
    Model,
    ModelDescriptor,
    build,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from distillkit.optim import SGD, OptimSpec, lr_at_epoch
from distillkit.state import EpochRecord, RunHistory, TeacherSource, TrainResult
from distillkit.tensor import backward, log_softmax, no_grad
from distillkit.utils import split_seed

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


def _as_input(features: np.ndarray, descriptor: ModelDescriptor) -> np.ndarray:
    shape = (len(features), *descriptor.input_shape)
    if features[0].size != int(np.prod(descriptor.input_shape)):
        raise ShapeError(
            f"examples with {features[0].size} features cannot feed input shape {descriptor.input_shape}"
        )
    return features.reshape(shape)


def evaluate(model: Model, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)``; ties in argmax go to the lowest index."""
    k = model.descriptor.num_classes
    if dataset.num_classes > k or np.any(dataset.labels >= k):
        raise DomainError(f"dataset labels reach {int(dataset.labels.max())} but the model has K={k}")
    correct = 0
    total_loss = 0.0
    with no_grad():
        for xb, yb in batches(dataset, batch_size, shuffle=False):
            logits = model(_as_input(xb, model.descriptor))
            loss = cross_entropy(one_hot(yb, k), log_softmax(logits, axis=-1))
            total_loss += loss.item() * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    n = len(dataset)
    return correct / n, total_loss / n


def load_teacher(source: TeacherSource, descriptor: Optional[ModelDescriptor] = None) -> Optional[Model]:
    """Materialise the frozen teacher described by ``source``.

    ``virtual`` and ``none`` sources have no model; ``self`` teachers are
    produced by :func:`run_tf_self` and cannot be loaded from a source alone.
    """
    match source.kind:
        case "none" | "virtual":
            return None
        case "checkpoint":
            if source.path is None:
                raise CheckpointError("checkpoint teacher without a path")
            teacher = load_checkpoint(source.path)
            if descriptor is not None and teacher.descriptor.num_classes != descriptor.num_classes:
                raise ShapeError(
                    f"teacher has K={teacher.descriptor.num_classes}, student K={descriptor.num_classes}"
                )
            return teacher
        case _:
            raise ValueError(f"{source.kind!r} teachers are built by their protocol")


def train(
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    loss_spec: LossSpec,
    optim_spec: OptimSpec,
    *,
    epochs: int,
    batch_size: int,
    seed: int,
    teacher: Union[Model, TeacherSource, None] = None,
    snapshot_epochs: Sequence[int] = (),
    method: str = "baseline",
    history_seed: Optional[int] = None,
) -> TrainResult:
    """Train ``model`` in place with SGD and return its history, final weights and snapshots.

    Args:
        seed: Shuffle seed; batch order depends only on ``(seed, epoch)``.
        teacher: Frozen model (or a source resolving to one) whose logits feed
            the loss; they are recomputed per batch without recording a graph.
        snapshot_epochs: Completed-epoch counts after which a checkpoint is
            kept; ``0`` means the initial weights.
        history_seed: Seed reported in the history and checkpoints (defaults
            to ``seed``).
    """
    if isinstance(teacher, TeacherSource):
        teacher = load_teacher(teacher, model.descriptor)
    if loss_spec.needs_teacher and teacher is None:
        raise ValueError(f"loss {loss_spec.kind!r} needs a teacher model")
    if teacher is not None:
        if teacher.descriptor.num_classes != model.descriptor.num_classes:
            raise ShapeError(
                f"teacher has K={teacher.descriptor.num_classes}, model has K={model.descriptor.num_classes}"
            )
        teacher.freeze()
    k = model.descriptor.num_classes
    if train_set.num_classes != k or test_set.num_classes != k:
        raise ShapeError(f"datasets have K={train_set.num_classes}/{test_set.num_classes}, model K={k}")

    run_seed = seed if history_seed is None else history_seed
    history = RunHistory(method=method, seed=run_seed)
    snapshots: dict[int, Checkpoint] = {}
    wanted = set(snapshot_epochs)
    meta = {"method": method}
    if 0 in wanted:
        snapshots[0] = Checkpoint.from_model(model, epoch=0, seed=run_seed, metadata=meta)

    lr0 = optim_spec.base_lr(batch_size)
    optimizer = SGD(model.parameters(), optim_spec)
    started = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at_epoch(optim_spec, epoch, lr0)
        loss_sum, correct, step_seconds, n_steps = 0.0, 0, 0.0, 0
        for b, (xb, yb) in enumerate(batches(train_set, batch_size, seed=seed, epoch=epoch)):
            tick = time.perf_counter()
            teacher_logits = None
            if teacher is not None:
                with no_grad():
                    teacher_logits = teacher(_as_input(xb, teacher.descriptor)).data
            optimizer.zero_grad()
            try:
                logits = model(_as_input(xb, model.descriptor))
                loss = compute_loss(loss_spec, logits, yb, teacher_logits)
                backward(loss)
                optimizer.step(lr)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, loss_spec.kind, exc.value) from exc
            step_seconds += time.perf_counter() - tick
            n_steps += 1
            value = loss.item()
            logger.debug("epoch %d batch %d loss %.6f", epoch, b, value)
            loss_sum += value * len(yb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))

        try:
            test_acc, test_loss = evaluate(model, test_set)
        except NonFiniteError as exc:
            raise TrainingDivergedError(epoch, n_steps, loss_spec.kind, exc.value) from exc
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / len(train_set),
            train_acc=correct / len(train_set),
            test_loss=test_loss,
            test_acc=test_acc,
            step_seconds=step_seconds / max(n_steps, 1),
        )
        history.records.append(record)
        logger.info(
            "%s seed %d epoch %d lr %.5f train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f",
            method,
            run_seed,
            epoch,
            lr,
            record.train_loss,
            record.train_acc,
            record.test_loss,
            record.test_acc,
        )
        if epoch + 1 in wanted:
            snapshots[epoch + 1] = Checkpoint.from_model(
                model, epoch=epoch + 1, seed=run_seed, metadata=meta
            )
    history.wall_seconds = time.perf_counter() - started
    final = Checkpoint.from_model(
        model, epoch=epochs, seed=run_seed, metadata={**meta, "history": history.to_metadata()}
    )
    return TrainResult(history=history, final=final, snapshots=snapshots)


###########################  Protocols  #######################################


def _fit(
    cfg: ExperimentConfig,
    model: Model,
    train_set: Dataset,
    test_set: Dataset,
    *,
    spec: LossSpec,
    shuffle_seed: int,
    seed: int,
    method: str,
    teacher: Optional[Model] = None,
) -> TrainResult:
    return train(
        model,
        train_set,
        test_set,
        spec,
        cfg.optim,
        epochs=cfg.training.epochs,
        batch_size=cfg.training.batch_size,
        seed=shuffle_seed,
        teacher=teacher,
        snapshot_epochs=cfg.training.snapshot_epochs,
        method=method,
        history_seed=seed,
    )


def run_baseline(
    cfg: ExperimentConfig, seed: int, train_set: Dataset, test_set: Dataset, *, method: Optional[str] = None
) -> TrainResult:
    """Train from scratch with cross-entropy, or label smoothing when the protocol is ``lsr``."""
    protocol = cfg.protocol if cfg.protocol == "lsr" else "baseline"
    seeds = split_seed(seed)
    model = build(cfg.model.to_descriptor(), seeds.init)
    return _fit(
        cfg,
        model,
        train_set,
        test_set,
        spec=cfg.loss.loss_spec(protocol),
        shuffle_seed=seeds.shuffle,
        seed=seed,
        method=method or protocol,
    )


def _distil(
    cfg: ExperimentConfig,
    seed: int,
    train_set: Dataset,
    test_set: Dataset,
    teacher_path: Path,
    method: str,
) -> TrainResult:
    descriptor = cfg.model.to_descriptor()
    teacher = load_teacher(TeacherSource(kind="checkpoint", path=teacher_path), descriptor)
    assert teacher is not None
    seeds = split_seed(seed)
    result = _fit(
        cfg,
        build(descriptor, seeds.init),
        train_set,
        test_set,
        spec=cfg.loss.loss_spec("kd"),
        shuffle_seed=seeds.shuffle,
        seed=seed,
        method=method,
        teacher=teacher,
    )
    result.history.teacher = teacher_path.stem
    return result


def run_normal_kd(
    cfg: ExperimentConfig,
    seed: int,
    train_set: Dataset,
    test_set: Dataset,
    teacher_path: Optional[Path] = None,
) -> TrainResult:
    """Distil ``cfg.model`` from the frozen ``teacher.checkpoint``."""
    path = teacher_path or cfg.teacher.checkpoint
    if path is None:
        raise CheckpointError("normal KD needs a teacher checkpoint")
    return _distil(cfg, seed, train_set, test_set, path, "kd")


def run_re_kd(
    cfg: ExperimentConfig,
    seed: int,
    train_set: Dataset,
    test_set: Dataset,
    student_path: Optional[Path] = None,
) -> TrainResult:
    """Train the larger ``cfg.model`` with the smaller checkpoint as its teacher."""
    path = student_path or cfg.teacher.checkpoint
    if path is None:
        raise CheckpointError("reversed KD needs the smaller model's checkpoint")
    return _distil(cfg, seed, train_set, test_set, path, "re-kd")


def run_de_kd(
    cfg: ExperimentConfig,
    seed: int,
    train_set: Dataset,
    test_set: Dataset,
    teacher_path: Optional[Path] = None,
    method: str = "de-kd",
) -> TrainResult:
    """Distil from a poorly-trained snapshot and record the teacher's own test accuracy."""
    path = teacher_path or cfg.teacher.checkpoint
    if path is None:
        raise CheckpointError("De-KD needs a snapshot teacher checkpoint")
    teacher_acc, _ = evaluate(load_checkpoint(path), test_set)
    logger.info("de-kd teacher %s test accuracy %.4f", path, teacher_acc)
    result = _distil(cfg, seed, train_set, test_set, path, method)
    result.history.teacher_acc = teacher_acc
    return result


def de_kd_curve(
    cfg: ExperimentConfig, seed: int, train_set: Dataset, test_set: Dataset
) -> list[TrainResult]:
    """One De-KD run per configured snapshot teacher, in configuration order."""
    paths = cfg.teacher.paths()
    if len(paths) == 1:
        return [run_de_kd(cfg, seed, train_set, test_set, paths[0])]
    return [
        run_de_kd(cfg, seed, train_set, test_set, path, method=f"de-kd@{path.stem}")
        for path in paths
    ]


def _stage1_key(
    cfg: ExperimentConfig, stage1_seed: int, train_set: Dataset, test_set: Dataset
) -> str:
    payload = msgspec.json.encode(
        {
            "descriptor": cfg.model.to_descriptor(),
            "seed": stage1_seed,
            "optim": cfg.optim.model_dump(mode="json"),
            "epochs": cfg.training.epochs,
            "batch_size": cfg.training.batch_size,
            "loss": cfg.loss.loss_spec("lsr" if cfg.protocol == "lsr" else "baseline").model_dump(mode="json"),
            "dataset": cfg.dataset.key,
            "data": [train_set.digest(), test_set.digest()],
        }
    )
    return hashlib.sha256(payload).hexdigest()[:16]


_stage1_memory: dict[str, TrainResult] = {}


def clear_stage1_cache() -> None:
    """Forget stage-1 models kept in this process."""
    _stage1_memory.clear()


def pretrain_stage1(
    cfg: ExperimentConfig,
    stage1_seed: int,
    train_set: Dataset,
    test_set: Dataset,
    cache_dir: Optional[Path] = None,
) -> TrainResult:
    """Train (or reuse) the normally-trained model that later teaches itself."""
    key = _stage1_key(cfg, stage1_seed, train_set, test_set)
    if key in _stage1_memory:
        logger.info("reusing stage-1 model %s from memory", key)
        return _stage1_memory[key]
    path = cache_dir / f"stage1-{key}.ckpt" if cache_dir is not None else None
    if path is not None and path.is_file():
        ckpt = read_checkpoint(path)
        history = RunHistory.from_metadata(ckpt.metadata["history"])
        logger.info("reusing stage-1 checkpoint %s", path)
        result = TrainResult(history=history, final=ckpt)
    else:
        result = run_baseline(cfg, stage1_seed, train_set, test_set, method="baseline")
        if path is not None:
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            save_checkpoint(result.final, tmp)
            tmp.replace(path)
    _stage1_memory[key] = result
    return result


def run_tf_self(
    cfg: ExperimentConfig,
    seed: int,
    train_set: Dataset,
    test_set: Dataset,
    cache_dir: Optional[Path] = None,
) -> tuple[TrainResult, TrainResult]:
    """Self-distillation: a normally-trained model teaches a fresh copy of its architecture.

    Returns:
        tuple[TrainResult, TrainResult]: The stage-1 baseline and the distilled run.
    """
    stage1_seed = cfg.tf_self.stage1_seed if cfg.tf_self.stage1_seed is not None else seed
    stage1 = pretrain_stage1(cfg, stage1_seed, train_set, test_set, cache_dir)
    teacher = stage1.final.to_model(requires_grad=False)

    stage2_seed = seed + cfg.tf_self.stage2_seed_offset
    seeds = split_seed(stage2_seed)
    if cfg.tf_self.finetune:
        student = stage1.final.to_model(requires_grad=True)
    else:
        student = build(cfg.model.to_descriptor(), seeds.init)
    distilled = _fit(
        cfg,
        student,
        train_set,
        test_set,
        spec=cfg.loss.loss_spec("tf-self"),
        shuffle_seed=seeds.shuffle,
        seed=seed,
        method="tf-self",
        teacher=teacher,
    )
    distilled.history.teacher = f"stage1-seed{stage1_seed}"
    return stage1, distilled


def run_tf_reg(cfg: ExperimentConfig, seed: int, train_set: Dataset, test_set: Dataset) -> TrainResult:
    """Train against the hand-designed virtual teacher; only the student model is built."""
    seeds = split_seed(seed)
    model = build(cfg.model.to_descriptor(), seeds.init)
    return _fit(
        cfg,
        model,
        train_set,
        test_set,
        spec=cfg.loss.loss_spec("tf-reg"),
        shuffle_seed=seeds.shuffle,
        seed=seed,
        method="tf-reg",
    )
