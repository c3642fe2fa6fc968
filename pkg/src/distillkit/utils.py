"""Utility functions for seeds, metrics files, summaries and result tables.

Functions:
    split_seed: Split one root seed into init/shuffle/data seeds.
    write_metrics: Append a run's epoch and summary records to a JSONL file.
    read_metrics: Decode a metrics file into typed records.
    summarize: Aggregate per-seed summary records into mean and std per method.
    format_compare_table: Render summaries as a baseline-plus-delta table.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import msgspec
import numpy as np

from distillkit.state import RunHistory

METRICS_SCHEMA_VERSION = 1


class RunSeeds(NamedTuple):
    """Seeds derived from one root seed."""

    init: int
    shuffle: int
    data: int


def split_seed(root: int) -> RunSeeds:
    """Derive independent init/shuffle/data seeds from ``root``."""
    children = np.random.SeedSequence(root).spawn(3)
    init, shuffle, data = (int(c.generate_state(1)[0]) for c in children)
    return RunSeeds(init=init, shuffle=shuffle, data=data)


##############################  Metrics records  ##############################


class EpochMetrics(msgspec.Struct, tag="epoch", tag_field="kind", forbid_unknown_fields=True):
    """One epoch of one method of one seed."""

    v: int
    run: str
    method: str
    seed: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    step_seconds: float


class SummaryMetrics(msgspec.Struct, tag="summary", tag_field="kind", forbid_unknown_fields=True):
    """Headline numbers of one method of one seed."""

    v: int
    run: str
    method: str
    seed: int
    best_test_acc: float
    best_epoch: int
    final_test_acc: float
    teacher_acc: Optional[float]
    teacher: Optional[str]
    wall_seconds: float


MetricsRecord = Union[EpochMetrics, SummaryMetrics]
TIMING_FIELDS = ("step_seconds", "wall_seconds")

_encoder = msgspec.json.Encoder()
_decoder = msgspec.json.Decoder(MetricsRecord)


def history_records(run: str, history: RunHistory) -> list[MetricsRecord]:
    """Metrics records for one history: one per epoch plus a final summary."""
    records: list[MetricsRecord] = [
        EpochMetrics(
            v=METRICS_SCHEMA_VERSION,
            run=run,
            method=history.method,
            seed=history.seed,
            epoch=r.epoch,
            lr=r.lr,
            train_loss=r.train_loss,
            train_acc=r.train_acc,
            test_loss=r.test_loss,
            test_acc=r.test_acc,
            step_seconds=r.step_seconds,
        )
        for r in history.records
    ]
    records.append(
        SummaryMetrics(
            v=METRICS_SCHEMA_VERSION,
            run=run,
            method=history.method,
            seed=history.seed,
            best_test_acc=history.best_test_acc,
            best_epoch=history.best_epoch,
            final_test_acc=history.final_test_acc,
            teacher_acc=history.teacher_acc,
            teacher=history.teacher,
            wall_seconds=history.wall_seconds,
        )
    )
    return records


def write_metrics(path: Path, run: str, histories: Iterable[RunHistory]) -> Path:
    """Write newline-delimited metrics records for ``histories`` to ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        _encoder.encode(record)
        for history in histories
        for record in history_records(run, history)
    ]
    path.write_bytes(b"".join(line + b"\n" for line in lines))
    return path


def read_metrics(path: Path) -> list[MetricsRecord]:
    """Decode a metrics file; raises ``msgspec.ValidationError`` on schema drift."""
    records = []
    for line in path.read_bytes().splitlines():
        if line.strip():
            record = _decoder.decode(line)
            if record.v != METRICS_SCHEMA_VERSION:
                raise msgspec.ValidationError(f"unsupported metrics schema v={record.v}")
            records.append(record)
    return records


def strip_timing(record: MetricsRecord) -> dict:
    """Record as a dict without the nondeterministic timing fields."""
    data = msgspec.to_builtins(record)
    for name in TIMING_FIELDS:
        data.pop(name, None)
    return data


##############################  Summaries  ####################################


class MethodSummary(msgspec.Struct):
    """Best test accuracy of one method across seeds."""

    method: str
    seeds: list[int]
    best_test_acc: list[float]
    mean: float
    std: float
    teacher_acc: Optional[float] = None


class RunSummary(msgspec.Struct):
    """Contents of ``summary.json``."""

    v: int
    run: str
    protocol: str
    dataset: str
    model: str
    primary: str
    methods: list[MethodSummary]

    def method(self, name: str) -> MethodSummary:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def summarize(
    records: Iterable[MetricsRecord],
    *,
    run: str,
    protocol: str,
    dataset: str,
    model: str,
    primary: str,
) -> RunSummary:
    """Aggregate summary records by method, in first-seen order."""
    grouped: dict[str, list[SummaryMetrics]] = {}
    for record in records:
        if isinstance(record, SummaryMetrics):
            grouped.setdefault(record.method, []).append(record)
    methods = []
    for method, rows in grouped.items():
        rows = sorted(rows, key=lambda r: r.seed)
        mean, std = mean_std([r.best_test_acc for r in rows])
        teacher_accs = [r.teacher_acc for r in rows if r.teacher_acc is not None]
        methods.append(
            MethodSummary(
                method=method,
                seeds=[r.seed for r in rows],
                best_test_acc=[r.best_test_acc for r in rows],
                mean=mean,
                std=std,
                teacher_acc=mean_std(teacher_accs)[0] if teacher_accs else None,
            )
        )
    return RunSummary(
        v=METRICS_SCHEMA_VERSION,
        run=run,
        protocol=protocol,
        dataset=dataset,
        model=model,
        primary=primary,
        methods=methods,
    )


def write_summary(directory: Path, summary: RunSummary) -> list[Path]:
    """Write ``summary.json`` and ``summary.tsv`` into ``directory``."""
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "summary.json"
    json_path.write_bytes(msgspec.json.format(_encoder.encode(summary), indent=2) + b"\n")
    tsv_path = directory / "summary.tsv"
    lines = ["method\tseeds\tmean_acc\tstd_acc\tteacher_acc"]
    for m in summary.methods:
        teacher = "" if m.teacher_acc is None else f"{m.teacher_acc:.6f}"
        lines.append(f"{m.method}\t{len(m.seeds)}\t{m.mean:.6f}\t{m.std:.6f}\t{teacher}")
    tsv_path.write_text("\n".join(lines) + "\n")
    return [json_path, tsv_path]


def read_summary(path: Path) -> RunSummary:
    """Decode a ``summary.json`` file."""
    return msgspec.json.decode(Path(path).read_bytes(), type=RunSummary)


##############################  Tables  #######################################


def percent(value: float) -> str:
    """Format an accuracy in [0, 1] as percent with two decimals."""
    return f"{100.0 * value:.2f}"


def delta_points(value: float, baseline: float) -> str:
    """Signed difference in percentage points, e.g. ``+2.50``."""
    diff = 100.0 * (value - baseline)
    if math.isclose(diff, 0.0, abs_tol=5e-7):
        diff = 0.0
    return f"{diff:+.2f}"


def format_compare_table(summaries: Sequence[RunSummary]) -> str:
    """Render the first summary's primary method as baseline and every other method with ``(+delta)``."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two summaries")
    first = summaries[0]
    for s in summaries[1:]:
        if s.dataset != first.dataset or s.model != first.model:
            raise ValueError(
                f"summary {s.run!r} ({s.dataset}, {s.model}) does not match "
                f"{first.run!r} ({first.dataset}, {first.model})"
            )
    baseline = first.method(first.primary)
    lines = [
        f"dataset: {first.dataset}",
        f"model: {first.model}",
        "",
        "| run | method | top-1 acc (%) |",
        "|---|---|---|",
        f"| {first.run} | {baseline.method} | {percent(baseline.mean)} ± {percent(baseline.std)} |",
    ]
    for s in summaries:
        for m in s.methods:
            if s is first and m.method == baseline.method:
                continue
            lines.append(
                f"| {s.run} | {m.method} | {percent(m.mean)} ± {percent(m.std)} "
                f"({delta_points(m.mean, baseline.mean)}) |"
            )
    return "\n".join(lines) + "\n"
