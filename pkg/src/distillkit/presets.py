"""Shipped experiment presets.

Each preset carries the published temperature/weight for one protocol and
model pairing, with the dataset, architectures and schedule substituted by
desk-scale stand-ins. :func:`render_preset` marks every substitution in TOML
comments so a full-scale run knows what to change back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from distillkit.configuration import ExperimentConfig, default_output_dir, dump_config
from distillkit.errors import ConfigError

DESK_SEEDS = [0, 1, 2, 3, 4]
DESK_EPOCHS = 40
DESK_BATCH = 64
DESK_CLASSES = 10


@dataclass(frozen=True)
class Recipe:
    """An optimisation recipe and its desk-scale shrink."""

    original: str
    optim: dict[str, Any]


RECIPES: dict[str, Recipe] = {
    "desk": Recipe(
        original="40 epochs, batch 64, lr 0.1 / 5 at epochs 20 and 30, momentum 0.9, wd 5e-4",
        optim={"lr0": 0.1, "milestones": [20, 30], "decay_factor": 0.2, "weight_decay": 5e-4},
    ),
    "cifar": Recipe(
        original="200 epochs, batch 128, lr 0.1 / 5 at epochs 60, 120, 160, momentum 0.9, wd 5e-4",
        optim={"lr0": 0.1, "milestones": [20, 30], "decay_factor": 0.2, "weight_decay": 5e-4},
    ),
    "tiny-imagenet": Recipe(
        original="200 epochs, batch bn in {64, 128}, lr 0.1*bn/128 / 10 at epochs 60, 120, 160, momentum 0.9, wd 5e-4",
        optim={
            "lr0": 0.1,
            "ref_batch": 128,
            "milestones": [20, 30],
            "decay_factor": 0.1,
            "weight_decay": 5e-4,
        },
    ),
    "imagenet": Recipe(
        original="90 epochs, batch bn in {256, 512}, lr 0.1*bn/256 / 10 at epochs 30, 60, 80, momentum 0.9, wd 1e-4",
        optim={
            "lr0": 0.1,
            "ref_batch": 256,
            "milestones": [13, 27, 36],
            "decay_factor": 0.1,
            "weight_decay": 1e-4,
        },
    ),
}

# Desk-scale stand-ins: (synthetic feature dim, model section).
MODELS: dict[str, tuple[int, dict[str, Any]]] = {
    "small": (32, {"arch": "mlp", "input_shape": [32], "widths": [32, 256, 10]}),
    "large": (32, {"arch": "mlp", "input_shape": [32], "widths": [32, 1024, 512, 10]}),
    "cnn": (
        192,
        {"arch": "plain_cnn", "input_shape": [3, 8, 8], "channels": [8, 16, 32], "fc": [64]},
    ),
    "image-large": (192, {"arch": "mlp", "input_shape": [192], "widths": [192, 1024, 512, 10]}),
}

# Published architectures by their desk stand-in when they are the only model.
_SIZE = {
    "mobilenetv2": "small",
    "shufflenetv2": "small",
    "plaincnn": "cnn",
    "resnet18": "large",
    "resnet50": "large",
    "googlenet": "large",
    "densenet121": "large",
    "resnext29": "large",
}

_DATASET_LABELS = {
    "cifar10": "CIFAR10 (10 classes, 32x32 RGB)",
    "cifar100": "CIFAR100 (100 classes, 32x32 RGB)",
    "tiny-imagenet": "Tiny-ImageNet (200 classes, 64x64 RGB)",
    "imagenet": "ImageNet (1000 classes)",
    "desk": "synthetic blobs",
}

_RECIPE_BY_DATASET = {
    "cifar10": "cifar",
    "cifar100": "cifar",
    "tiny-imagenet": "tiny-imagenet",
    "imagenet": "imagenet",
    "desk": "desk",
}


@dataclass(frozen=True)
class Preset:
    """One shipped configuration."""

    name: str
    protocol: str
    dataset: str
    model: str
    summary: str
    loss: dict[str, Any] = field(default_factory=dict)
    substitutions: tuple[str, ...] = ()
    teacher_run: Optional[str] = None
    teacher_files: tuple[str, ...] = ()
    snapshot_epochs: tuple[int, ...] = ()

    @property
    def recipe(self) -> Recipe:
        return RECIPES[_RECIPE_BY_DATASET[self.dataset]]

    def config(self) -> ExperimentConfig:
        dim, model = MODELS[self.model]
        data: dict[str, Any] = {
            "name": self.name,
            "protocol": self.protocol,
            "dataset": {
                "kind": "synth",
                "num_classes": DESK_CLASSES,
                "n_per_class": 200,
                "dim": dim,
                "spread": 0.32,
                "seed": 0,
            },
            "model": {**model, "num_classes": DESK_CLASSES},
            "loss": dict(self.loss),
            "optim": dict(self.recipe.optim),
            "training": {
                "epochs": DESK_EPOCHS,
                "batch_size": DESK_BATCH,
                "snapshot_epochs": list(self.snapshot_epochs),
            },
            "seeds": list(DESK_SEEDS),
        }
        if self.model == "cnn":
            data["optim"]["lr0"] = 0.05
        if self.teacher_run is not None:
            ckpt_dir = default_output_dir() / self.teacher_run / "checkpoints" / "seed0"
            paths = [str(ckpt_dir / name) for name in self.teacher_files]
            if len(paths) == 1:
                data["teacher"] = {"checkpoint": paths[0]}
            else:
                data["teacher"] = {"checkpoints": paths}
        return ExperimentConfig.model_validate(data)


def _kd_alpha_tau(tau: float, alpha: float) -> dict[str, Any]:
    return {"tau": tau, "alpha": alpha}


############################  Desk presets  ###################################

_DESK_SNAPSHOTS = (1, 2, 5, 10, 20)

_PRESETS: list[Preset] = [
    Preset("baseline-desk", "baseline", "desk", "small", "cross-entropy baseline, small MLP"),
    Preset(
        "baseline-desk-large",
        "baseline",
        "desk",
        "large",
        "cross-entropy baseline, large MLP; keeps snapshot teachers for de-kd",
        snapshot_epochs=_DESK_SNAPSHOTS,
    ),
    Preset("baseline-desk-cnn", "baseline", "desk", "cnn", "cross-entropy baseline, plain CNN"),
    Preset(
        "baseline-desk-image-large",
        "baseline",
        "desk",
        "image-large",
        "cross-entropy baseline, large MLP over image-shaped features",
    ),
    Preset("lsr-desk", "lsr", "desk", "small", "label smoothing, alpha=0.1", loss={"alpha": 0.1}),
    Preset(
        "kd-desk",
        "kd",
        "desk",
        "small",
        "normal KD, large MLP teaches small MLP: tau=20, alpha=0.9",
        loss=_kd_alpha_tau(20, 0.9),
        teacher_run="baseline-desk-large",
        teacher_files=("baseline-final.ckpt",),
    ),
    Preset(
        "rekd-desk",
        "re-kd",
        "desk",
        "large",
        "reversed KD, small MLP teaches large MLP: tau=20, alpha=0.6",
        loss=_kd_alpha_tau(20, 0.6),
        teacher_run="baseline-desk",
        teacher_files=("baseline-final.ckpt",),
    ),
    Preset(
        "dekd-desk",
        "de-kd",
        "desk",
        "small",
        "defective KD curve over large-MLP snapshots: tau=20, alpha=0.95",
        loss=_kd_alpha_tau(20, 0.95),
        teacher_run="baseline-desk-large",
        teacher_files=tuple(f"baseline-snapshot-e{e}.ckpt" for e in _DESK_SNAPSHOTS),
    ),
    Preset(
        "tfself-desk",
        "tf-self",
        "desk",
        "small",
        "self-distillation, small MLP: tau=20, alpha=0.95",
        loss=_kd_alpha_tau(20, 0.95),
    ),
    Preset(
        "tfreg-desk",
        "tf-reg",
        "desk",
        "small",
        "virtual-teacher regularisation, small MLP: a=0.99, tau=20, alpha=0.1",
        loss={"tau": 20, "alpha": 0.1, "a": 0.99},
    ),
]


########################  Normal KD and Re-KD  ################################

# (dataset, teacher, student, KD (tau, alpha), Re-KD (tau, alpha))
_KD_PAIRS = [
    ("cifar10", "resnet18", "plaincnn", (20, 0.9), (20, 0.01)),
    ("cifar10", "resnet18", "mobilenetv2", (20, 0.9), (20, 0.05)),
    ("cifar10", "mobilenetv2", "plaincnn", (20, 0.4), (20, 0.1)),
    ("cifar10", "resnext29", "resnet18", (6, 0.95), (20, 0.1)),
    ("cifar100", "resnet18", "mobilenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "resnet18", "shufflenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "resnet50", "mobilenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "resnet50", "shufflenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "densenet121", "mobilenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "densenet121", "shufflenetv2", (20, 0.95), (20, 0.6)),
    ("cifar100", "resnext29", "mobilenetv2", (20, 0.6), (20, 0.6)),
    ("cifar100", "resnext29", "resnet18", (20, 0.6), (20, 0.6)),
    ("tiny-imagenet", "resnet18", "mobilenetv2", (20, 0.1), (20, 0.6)),
    ("tiny-imagenet", "resnet18", "shufflenetv2", (20, 0.1), (20, 0.6)),
    ("tiny-imagenet", "resnet50", "mobilenetv2", (20, 0.1), (20, 0.1)),
    ("tiny-imagenet", "resnet50", "shufflenetv2", (20, 0.1), (20, 0.5)),
    ("tiny-imagenet", "resnet50", "resnet18", (20, 0.5), (20, 0.1)),
]


def _kd_presets() -> list[Preset]:
    presets = []
    for ds, teacher, student, (kd_tau, kd_alpha), (re_tau, re_alpha) in _KD_PAIRS:
        cnn = student == "plaincnn"
        small, large = ("cnn", "image-large") if cnn else ("small", "large")
        subst = (
            f"teacher: {teacher} -> {MODELS[large][1]['arch']} {large}",
            f"student: {student} -> {MODELS[small][1]['arch']} {small}",
        )
        presets.append(
            Preset(
                f"kd-{ds}-{teacher}-{student}",
                "kd",
                ds,
                small,
                f"normal KD, {teacher} teaches {student}: tau={kd_tau}, alpha={kd_alpha}",
                loss=_kd_alpha_tau(kd_tau, kd_alpha),
                substitutions=subst,
                teacher_run="baseline-desk-image-large" if cnn else "baseline-desk-large",
                teacher_files=("baseline-final.ckpt",),
            )
        )
        presets.append(
            Preset(
                f"rekd-{ds}-{teacher}-{student}",
                "re-kd",
                ds,
                large,
                f"reversed KD, {student} teaches {teacher}: tau={re_tau}, alpha={re_alpha}",
                loss=_kd_alpha_tau(re_tau, re_alpha),
                substitutions=subst,
                teacher_run="baseline-desk-cnn" if cnn else "baseline-desk",
                teacher_files=("baseline-final.ckpt",),
            )
        )
    return presets


###############################  De-KD  #######################################

# (dataset, poorly-trained teacher, its accuracy, desk snapshot epoch, student, tau, alpha)
_DEKD_ROWS = [
    ("cifar100", "resnet18", "15.48%", 1, "mobilenetv2", 20, 0.95),
    ("cifar100", "resnet18", "15.48%", 1, "shufflenetv2", 20, 0.95),
    ("cifar100", "resnet50", "45.82%", 10, "mobilenetv2", 20, 0.95),
    ("cifar100", "resnet50", "45.82%", 10, "shufflenetv2", 20, 0.95),
    ("cifar100", "resnet50", "45.82%", 10, "resnet18", 20, 0.6),
    ("cifar100", "resnext29", "51.94%", 10, "mobilenetv2", 20, 0.95),
    ("cifar100", "resnext29", "51.94%", 10, "shufflenetv2", 20, 0.95),
    ("cifar100", "resnext29", "51.94%", 10, "resnet18", 20, 0.6),
    ("tiny-imagenet", "resnet18", "9.41%", 1, "mobilenetv2", 20, 0.1),
    ("tiny-imagenet", "resnet18", "9.41%", 1, "shufflenetv2", 20, 0.1),
    ("tiny-imagenet", "resnet50", "31.01%", 10, "mobilenetv2", 20, 0.1),
    ("tiny-imagenet", "resnet50", "31.01%", 10, "shufflenetv2", 20, 0.1),
]


def _dekd_presets() -> list[Preset]:
    presets = []
    for ds, teacher, acc, epoch, student, tau, alpha in _DEKD_ROWS:
        suffix = "" if student == "mobilenetv2" else f"-{student}"
        presets.append(
            Preset(
                f"dekd-{ds}-{teacher}-teacher{suffix}",
                "de-kd",
                ds,
                "small",
                f"defective KD, {teacher} at {acc} teaches {student}: tau={tau}, alpha={alpha}",
                loss=_kd_alpha_tau(tau, alpha),
                substitutions=(
                    f"teacher: {teacher} ({acc}) -> large MLP snapshot after {epoch} epoch(s)",
                    f"student: {student} -> mlp small",
                ),
                teacher_run="baseline-desk-large",
                teacher_files=(f"baseline-snapshot-e{epoch}.ckpt",),
            )
        )
    return presets


############################  Tf-KD presets  ##################################

_SELF_ROWS = [
    ("cifar100", "mobilenetv2", 20, 0.95),
    ("cifar100", "shufflenetv2", 20, 0.95),
    ("cifar100", "resnet18", 6, 0.95),
    ("cifar100", "googlenet", 20, 0.4),
    ("cifar100", "densenet121", 20, 0.95),
    ("cifar100", "resnext29", 20, 0.9),
    ("tiny-imagenet", "mobilenetv2", 20, 0.1),
    ("tiny-imagenet", "shufflenetv2", 20, 0.1),
    ("tiny-imagenet", "resnet18", 6, 0.1),
    ("tiny-imagenet", "resnet50", 20, 0.1),
    ("tiny-imagenet", "densenet121", 20, 0.15),
]

_REG_ROWS = [
    ("cifar100", "mobilenetv2", 40, 0.95),
    ("cifar100", "shufflenetv2", 20, 0.95),
    ("cifar100", "resnet18", 20, 0.1),
    ("cifar100", "googlenet", 40, 0.1),
    ("tiny-imagenet", "mobilenetv2", 20, 0.1),
    ("tiny-imagenet", "shufflenetv2", 20, 0.1),
    ("tiny-imagenet", "resnet50", 20, 0.1),
    ("tiny-imagenet", "densenet121", 20, 0.1),
]

_IMAGENET_MODELS = "model: resnet18/resnet50/densenet121/resnext101 -> mlp large"


def _teacher_free_presets() -> list[Preset]:
    presets = [
        Preset(
            f"tfself-{ds}-{model}",
            "tf-self",
            ds,
            _SIZE[model],
            f"self-distillation, {model}: tau={tau}, alpha={alpha}",
            loss=_kd_alpha_tau(tau, alpha),
            substitutions=(f"model: {model} -> mlp {_SIZE[model]}",),
        )
        for ds, model, tau, alpha in _SELF_ROWS
    ]
    presets += [
        Preset(
            f"tfreg-{ds}-{model}",
            "tf-reg",
            ds,
            _SIZE[model],
            f"virtual-teacher regularisation, {model}: a=0.99, tau={tau}, alpha={alpha}",
            loss={"tau": tau, "alpha": alpha, "a": 0.99},
            substitutions=(f"model: {model} -> mlp {_SIZE[model]}",),
        )
        for ds, model, tau, alpha in _REG_ROWS
    ]
    presets += [
        Preset(
            "tfself-imagenet",
            "tf-self",
            "imagenet",
            "large",
            "self-distillation, every ImageNet model: tau=20, alpha=0.1",
            loss=_kd_alpha_tau(20, 0.1),
            substitutions=(_IMAGENET_MODELS,),
        ),
        Preset(
            "tfreg-imagenet",
            "tf-reg",
            "imagenet",
            "large",
            "virtual-teacher regularisation, every ImageNet model: a=0.99, tau=20, alpha=0.1",
            loss={"tau": 20, "alpha": 0.1, "a": 0.99},
            substitutions=(_IMAGENET_MODELS,),
        ),
    ]
    return presets


PRESETS: dict[str, Preset] = {
    p.name: p for p in (*_PRESETS, *_kd_presets(), *_dekd_presets(), *_teacher_free_presets())
}


def available() -> list[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available presets:\n  " + "\n  ".join(available())
        ) from None


def preset(name: str) -> ExperimentConfig:
    """Return the validated configuration of preset ``name``."""
    return get_preset(name).config()


def render_preset(name: str) -> str:
    """Render preset ``name`` as commented TOML."""
    p = get_preset(name)
    cfg = p.config()
    dim, model = MODELS[p.model]
    milestones = ", ".join(map(str, cfg.optim.milestones))
    lines = [
        f"# distillkit preset: {p.name}",
        f"# {p.summary}",
        f"# recipe: {p.recipe.original}",
        "#",
        "# DESK-SCALE SUBSTITUTIONS (edit these for a full-scale run):",
        f"#   dataset: {_DATASET_LABELS[p.dataset]} -> synthetic blobs (K={DESK_CLASSES}, dim={dim})",
        f"#   model: {model['arch']} {p.model}",
        *(f"#   {line}" for line in p.substitutions),
        f"#   schedule: {DESK_EPOCHS} epochs, batch {DESK_BATCH}, milestones {milestones}, "
        f"lr0 {cfg.optim.lr0:g}",
    ]
    if p.model == "cnn":
        lines.append("#   optimizer: Adam lr 0.01 for the plain CNN -> SGD lr 0.05")
    if p.teacher_run is not None:
        lines.append(f"#   teacher: checkpoint(s) written by `distillkit run` of preset {p.teacher_run}")
    return "\n".join(lines) + "\n\n" + dump_config(cfg)
