"""Run state shared by the trainer, the experiment graph and the CLI.

Classes:
    EpochRecord: One epoch of training/evaluation statistics.
    RunHistory: Per-epoch records of one training run plus headline numbers.
    TeacherSource: Where a run's soft targets come from.
    TrainResult: A finished run: history, final weights and snapshots.
    ExperimentState: The state flowing through the per-seed experiment graph.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Any, Literal, Optional

import msgspec

from distillkit.data import Dataset
from distillkit.nn import Checkpoint


class EpochRecord(msgspec.Struct, frozen=True):
    """Statistics gathered at the end of one epoch."""

    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    step_seconds: float = 0.0
    """Mean wall time of one optimisation step; the only nondeterministic field."""


@dataclass
class RunHistory:
    """Everything one training run reports."""

    method: str
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    teacher_acc: Optional[float] = None
    """Test accuracy of the (poorly-trained) teacher, recorded by De-KD runs."""
    teacher: Optional[str] = None
    """Label of the teacher checkpoint, if any."""

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest test accuracy (earliest on ties); -1 when empty."""
        if not self.records:
            return -1
        best = max(self.records, key=lambda r: (r.test_acc, -r.epoch))
        return best.epoch

    @property
    def best_test_acc(self) -> float:
        if not self.records:
            return 0.0
        return max(r.test_acc for r in self.records)

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else 0.0

    @property
    def mean_step_seconds(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.step_seconds for r in self.records) / len(self.records)

    def deterministic_view(self) -> list[tuple[Any, ...]]:
        """Records with timing stripped, for reproducibility comparisons."""
        return [
            (r.epoch, r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_acc)
            for r in self.records
        ]

    def to_metadata(self) -> dict[str, Any]:
        """Serialisable form stored inside checkpoint metadata."""
        return {
            "method": self.method,
            "seed": self.seed,
            "records": msgspec.to_builtins(self.records),
            "teacher_acc": self.teacher_acc,
        }

    @classmethod
    def from_metadata(cls, data: dict[str, Any]) -> "RunHistory":
        records = msgspec.convert(data.get("records", []), list[EpochRecord])
        return cls(
            method=data["method"],
            seed=data["seed"],
            records=records,
            teacher_acc=data.get("teacher_acc"),
        )


@dataclass(frozen=True)
class TeacherSource:
    """Origin of the soft targets used by a run."""

    kind: Literal["none", "checkpoint", "self", "virtual"] = "none"
    path: Optional[Path] = None
    a: Optional[float] = None
    tau: float = 1.0
    alpha: float = 0.0


@dataclass
class TrainResult:
    """A finished training run."""

    history: RunHistory
    final: Checkpoint
    snapshots: dict[int, Checkpoint] = field(default_factory=dict)


#############################  Experiment State  ##############################


@dataclass(kw_only=True)
class ExperimentState:
    """State of one seed of an experiment as it moves through the graph."""

    seed: int
    """Root seed of this run; init/shuffle/data seeds are split from it."""

    protocol: str = ""
    """Set by ``load_data`` from the configuration; drives routing."""

    train: Optional[Dataset] = None
    test: Optional[Dataset] = None

    results: Annotated[list[TrainResult], operator.add] = field(default_factory=list)
    """Finished runs, primary method last."""

    outputs: Annotated[list[str], operator.add] = field(default_factory=list)
    """Files written by the ``record`` node."""
