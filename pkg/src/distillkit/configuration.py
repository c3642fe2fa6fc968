"""Define the experiment configuration and its TOML representation."""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Literal, Optional, Type, TypeVar, Union

import msgspec
from langchain_core.runnables import RunnableConfig, ensure_config
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from distillkit.data import Dataset, load_csv, load_idx, synth_blobs
from distillkit.errors import ConfigError
from distillkit.losses import LossKind, LossSpec
from distillkit.nn import ModelDescriptor
from distillkit.optim import OptimSpec

logger = logging.getLogger(__name__)

Protocol = Literal["baseline", "lsr", "kd", "re-kd", "de-kd", "tf-self", "tf-reg"]

LOSS_KIND_BY_PROTOCOL: dict[str, LossKind] = {
    "baseline": "ce",
    "lsr": "lsr",
    "kd": "kd",
    "re-kd": "kd",
    "de-kd": "kd",
    "tf-self": "tf_self",
    "tf-reg": "tf_reg",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSettings(_Section):
    """Where the examples come from and how they are normalised."""

    kind: Literal["synth", "idx", "csv"] = Field(
        default="synth", description="Synthetic Gaussian blobs, IDX files or CSV files."
    )
    num_classes: int = Field(default=10, ge=2, description="Number of classes K.")
    n_per_class: int = Field(default=200, ge=5, description="synth: examples per class.")
    dim: int = Field(default=32, ge=1, description="synth: feature dimension.")
    spread: float = Field(default=0.32, gt=0.0, description="synth: blob standard deviation.")
    seed: Optional[int] = Field(
        default=None,
        description="synth: fixed data seed. If unset, the data seed is split from the run seed.",
    )
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    train_csv: Optional[Path] = None
    test_csv: Optional[Path] = None
    mean: float = Field(default=0.0, description="Normalisation mean (after scaling IDX pixels to [0, 1]).")
    std: float = Field(default=1.0, gt=0.0, description="Normalisation standard deviation.")

    @model_validator(mode="after")
    def _paths_for_kind(self) -> "DatasetSettings":
        required = {
            "synth": (),
            "idx": ("train_images", "train_labels", "test_images", "test_labels"),
            "csv": ("train_csv", "test_csv"),
        }[self.kind]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"dataset kind {self.kind!r} needs {', '.join(missing)}")
        return self

    def load(self, data_seed: int) -> tuple[Dataset, Dataset]:
        """Load (or generate) the train and test splits."""
        if self.kind == "synth":
            seed = self.seed if self.seed is not None else data_seed
            return synth_blobs(self.num_classes, self.n_per_class, self.dim, self.spread, seed)
        if self.kind == "idx":
            opts = dict(mean=self.mean, std=self.std, num_classes=self.num_classes)
            train = load_idx(self.train_images, self.train_labels, split="train", **opts)  # type: ignore[arg-type]
            test = load_idx(self.test_images, self.test_labels, split="test", **opts)  # type: ignore[arg-type]
            return train, test
        opts = dict(mean=self.mean, std=self.std, num_classes=self.num_classes)
        train = load_csv(self.train_csv, split="train", **opts)  # type: ignore[arg-type]
        test = load_csv(self.test_csv, split="test", **opts)  # type: ignore[arg-type]
        return train, test

    @property
    def key(self) -> str:
        """Identity of the data, used to refuse comparing unrelated summaries."""
        if self.kind == "synth":
            seed = "run" if self.seed is None else self.seed
            return (
                f"synth(K={self.num_classes},n={self.n_per_class},dim={self.dim},"
                f"spread={self.spread:g},seed={seed})"
            )
        if self.kind == "idx":
            return f"idx({self.train_images},{self.test_images})"
        return f"csv({self.train_csv},{self.test_csv})"


class ModelSettings(_Section):
    """Descriptor of the model being trained."""

    arch: Literal["mlp", "plain_cnn"] = "mlp"
    input_shape: tuple[int, ...] = Field(default=(32,), description="Per-example input shape.")
    num_classes: int = Field(default=10, ge=2)
    widths: tuple[int, ...] = Field(
        default=(32, 256, 10), description="mlp: every layer width, input and output included."
    )
    channels: tuple[int, ...] = Field(default=(), description="plain_cnn: three conv widths.")
    fc: tuple[int, ...] = Field(default=(), description="plain_cnn: hidden FC widths.")

    @model_validator(mode="after")
    def _valid_descriptor(self) -> "ModelSettings":
        self.to_descriptor()
        return self

    def to_descriptor(self) -> ModelDescriptor:
        if self.arch == "mlp":
            return ModelDescriptor(
                arch="mlp",
                input_shape=self.input_shape,
                num_classes=self.num_classes,
                widths=self.widths,
            )
        return ModelDescriptor(
            arch="plain_cnn",
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            channels=self.channels,
            fc=self.fc,
        )

    @property
    def key(self) -> str:
        if self.arch == "mlp":
            return f"mlp({'-'.join(map(str, self.widths))})"
        dims = "x".join(map(str, self.input_shape))
        return f"plain_cnn({dims};{'-'.join(map(str, self.channels))};{'-'.join(map(str, self.fc))})"


class TeacherSettings(_Section):
    checkpoint: Optional[Path] = Field(default=None, description="Frozen teacher checkpoint.")
    checkpoints: list[Path] = Field(
        default_factory=list, description="de-kd: several snapshot teachers for the accuracy curve."
    )

    def paths(self) -> list[Path]:
        if self.checkpoints:
            return list(self.checkpoints)
        return [self.checkpoint] if self.checkpoint is not None else []


class LossSettings(_Section):
    alpha: float = Field(default=0.1, ge=0.0, le=1.0, description="Smoothing / distillation weight.")
    tau: float = Field(default=20.0, gt=0.0, description="Softmax temperature.")
    a: Optional[float] = Field(
        default=None, gt=0.0, le=1.0, description="tf-reg: correct-class probability of the virtual teacher."
    )
    tau_squared_scaling: bool = False

    def loss_spec(self, protocol: str) -> LossSpec:
        """Build the :class:`LossSpec` a protocol trains with."""
        kind = LOSS_KIND_BY_PROTOCOL[protocol]
        return LossSpec(
            kind=kind,
            alpha=self.alpha,
            tau=self.tau,
            a=self.a if kind == "tf_reg" else None,
            tau_squared_scaling=self.tau_squared_scaling,
        )


class TrainingSettings(_Section):
    epochs: int = Field(default=40, ge=1)
    batch_size: int = Field(default=64, ge=1)
    snapshot_epochs: list[int] = Field(
        default_factory=list,
        description="Save a checkpoint after this many completed epochs (0 = initial weights).",
    )


class TfSelfSettings(_Section):
    stage1_seed: Optional[int] = Field(
        default=None,
        description="Seed of the pre-training stage, shared by every stage-2 seed. Defaults to the run seed.",
    )
    finetune: bool = Field(
        default=False, description="Start stage 2 from the pre-trained weights instead of a fresh init."
    )
    stage2_seed_offset: int = Field(default=0, description="Stage-2 seed = run seed + offset.")


class GridSettings(_Section):
    alpha: list[float] = Field(default_factory=list)
    tau: list[float] = Field(default_factory=list)
    a: list[float] = Field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.alpha or self.tau or self.a)

    def cells(self) -> list[dict[str, float]]:
        """Full-factorial loss overrides, in ``alpha``, ``tau``, ``a`` order."""
        axes = [(name, values) for name, values in (("alpha", self.alpha), ("tau", self.tau), ("a", self.a)) if values]
        if not axes:
            return []
        names = [name for name, _ in axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in axes))]


def default_output_dir() -> Path:
    return Path(os.getenv("DISTILLKIT_OUT", "runs"))


class ExperimentConfig(BaseModel):
    """A complete experiment: protocol, data, model, teacher, loss, schedule and seeds."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="experiment", pattern=r"^[A-Za-z0-9][A-Za-z0-9._-]*$")
    protocol: Protocol = "baseline"
    dataset: DatasetSettings = Field(default_factory=DatasetSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    teacher: TeacherSettings = Field(default_factory=TeacherSettings)
    loss: LossSettings = Field(default_factory=LossSettings)
    optim: OptimSpec = Field(default_factory=OptimSpec)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    tf_self: TfSelfSettings = Field(default_factory=TfSelfSettings)
    grid: GridSettings = Field(default_factory=GridSettings)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Path = Field(default_factory=default_output_dir)
    parallel: int = Field(default=1, ge=1, description="Worker processes for independent seeds.")

    @model_validator(mode="after")
    def _protocol_requirements(self) -> "ExperimentConfig":
        if self.protocol in ("kd", "re-kd") and self.teacher.checkpoint is None:
            raise ValueError(f"teacher.checkpoint is required for protocol {self.protocol!r}")
        if self.protocol == "de-kd" and not self.teacher.paths():
            raise ValueError("teacher.checkpoint or teacher.checkpoints is required for protocol 'de-kd'")
        if self.protocol == "tf-reg" and self.loss.a is None:
            raise ValueError("loss.a is required for protocol 'tf-reg'")
        if self.model.num_classes != self.dataset.num_classes:
            raise ValueError(
                f"model.num_classes ({self.model.num_classes}) != dataset.num_classes ({self.dataset.num_classes})"
            )
        bad = [e for e in self.training.snapshot_epochs if not 0 <= e <= self.training.epochs]
        if bad:
            raise ValueError(f"training.snapshot_epochs {bad} outside [0, {self.training.epochs}]")
        self.loss_spec()
        return self

    def loss_spec(self) -> LossSpec:
        return self.loss.loss_spec(self.protocol)

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.name

    def with_overrides(self, **updates: Any) -> "ExperimentConfig":
        """Revalidated copy with top-level fields replaced."""
        data = self.model_dump()
        data.update(updates)
        return ExperimentConfig.model_validate(data)


def expand_grid(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand ``cfg.grid`` into labelled sub-experiments under ``<output_dir>/<name>/``.

    Cells that fail validation (e.g. ``a`` below the virtual-teacher minimum)
    are skipped with a warning. An empty grid yields ``[("", cfg)]``.
    """
    if cfg.grid.empty:
        return [("", cfg)]
    expanded = []
    for overrides in cfg.grid.cells():
        label = "-".join(f"{k}{v:g}" for k, v in overrides.items())
        data = cfg.model_dump()
        data["loss"].update(overrides)
        data["grid"] = {}
        data["name"] = f"grid-{label}"
        data["output_dir"] = cfg.run_dir
        try:
            expanded.append((label, ExperimentConfig.model_validate(data)))
        except ValidationError as exc:
            logger.warning("skipping grid cell %s: %s", label, format_validation_error(exc))
    if not expanded:
        raise ConfigError("every grid cell failed validation")
    return expanded


#############################  TOML  ##########################################


def format_validation_error(exc: ValidationError) -> str:
    """One ``dotted.path: message`` line per pydantic error."""
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<config>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: Union[bytes, str]) -> ExperimentConfig:
    """Decode TOML text and validate it; raises :class:`ConfigError` with field-level messages."""
    try:
        raw = msgspec.toml.decode(data)
    except msgspec.DecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_bytes())


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as TOML that :func:`parse_config` reads back unchanged."""
    return msgspec.toml.encode(cfg.model_dump(mode="json", exclude_none=True)).decode("utf-8")


###########################  Graph configuration  #############################


@dataclass(kw_only=True)
class GraphConfiguration:
    """Configurable parameters of the experiment graph."""

    experiment: ExperimentConfig = field(
        metadata={"description": "The validated experiment this graph invocation runs one seed of."},
    )

    def __post_init__(self) -> None:
        """Accept a plain mapping in place of a validated experiment."""
        if isinstance(self.experiment, dict):
            self.experiment = ExperimentConfig.model_validate(self.experiment)

    @classmethod
    def from_runnable_config(cls: Type[T], config: Optional[RunnableConfig] = None) -> T:
        """Create a GraphConfiguration instance from a RunnableConfig object.

        Args:
            cls (Type[T]): The class itself.
            config (Optional[RunnableConfig]): The configuration object to use.

        Returns:
            T: An instance of GraphConfiguration with the specified configuration.
        """
        config = ensure_config(config)
        configurable = config.get("configurable") or {}
        _fields = {f.name for f in fields(cls) if f.init}
        if "experiment" not in configurable:
            raise ConfigError("the graph needs configurable['experiment']")
        return cls(**{k: v for k, v in configurable.items() if k in _fields})


T = TypeVar("T", bound=GraphConfiguration)
