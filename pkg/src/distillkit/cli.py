"""Command-line entry point.

Subcommands:
    run                   Run an experiment config (every seed, every grid cell).
    inspect-soft-targets  Tabulate temperature-softened targets against the uniform distribution.
    compare               Baseline-plus-delta table from two or more summary files.
    preset                Print a shipped preset as TOML.
    gradcheck             Finite-difference gradient suite.
    verify-identities     Exact label-smoothing / distillation identity suite.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import msgspec
import numpy as np
from dotenv import load_dotenv

from distillkit import checks, presets
from distillkit.configuration import ExperimentConfig, dump_config, expand_grid, load_config
from distillkit.errors import ConfigError, DistillKitError, ShapeError
from distillkit.graph import run_seed
from distillkit.losses import soften_virtual_teacher, softmax_temperature, uniform
from distillkit.nn import load_checkpoint
from distillkit.tensor import no_grad
from distillkit.utils import (
    RunSummary,
    SummaryMetrics,
    format_compare_table,
    mean_std,
    percent,
    read_metrics,
    read_summary,
    split_seed,
    summarize,
    write_summary,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
DEFAULT_TAUS = (1.0, 5.0, 10.0, 20.0, 50.0, 100.0)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(DistillKitError, ValueError):
    """Bad command-line arguments."""


##############################  run  ##########################################


def _check_inputs(cfg: ExperimentConfig) -> None:
    missing = [str(p) for p in cfg.teacher.paths() if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"teacher checkpoint not found: {', '.join(missing)}")


def _primary_method(cfg: ExperimentConfig, summary_methods: Sequence[str]) -> str:
    if cfg.protocol == "de-kd" and len(cfg.teacher.paths()) > 1:
        return summary_methods[-1]
    return cfg.protocol


def write_dekd_curve(path: Path, records: Sequence[SummaryMetrics]) -> Path:
    """Teacher accuracy against student best/final accuracy, one row per snapshot teacher."""
    grouped: dict[str, list[SummaryMetrics]] = {}
    for r in records:
        if r.teacher_acc is not None:
            grouped.setdefault(r.teacher or r.method, []).append(r)
    lines = ["teacher\tteacher_acc\tstudent_best_acc\tstudent_best_std\tstudent_final_acc\tseeds"]
    for teacher, rows in grouped.items():
        teacher_acc = float(np.mean([r.teacher_acc for r in rows]))
        best, best_std = mean_std([r.best_test_acc for r in rows])
        final, _ = mean_std([r.final_test_acc for r in rows])
        lines.append(f"{teacher}\t{teacher_acc:.6f}\t{best:.6f}\t{best_std:.6f}\t{final:.6f}\t{len(rows)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Run every seed of ``cfg``, then merge the per-seed metrics into summaries."""
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(dump_config(cfg))
    logger.info("running %s (%s) for seeds %s into %s", cfg.name, cfg.protocol, cfg.seeds, run_dir)
    if cfg.parallel > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel) as pool:
            list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        for seed in cfg.seeds:
            run_seed(cfg, seed)

    records = [r for seed in cfg.seeds for r in read_metrics(run_dir / f"metrics-seed{seed}.jsonl")]
    methods = list(dict.fromkeys(r.method for r in records if isinstance(r, SummaryMetrics)))
    summary = summarize(
        records,
        run=cfg.name,
        protocol=cfg.protocol,
        dataset=cfg.dataset.key,
        model=cfg.model.key,
        primary=_primary_method(cfg, methods),
    )
    write_summary(run_dir, summary)
    if cfg.protocol == "de-kd":
        write_dekd_curve(
            run_dir / "dekd_curve.tsv", [r for r in records if isinstance(r, SummaryMetrics)]
        )
    logger.info("finished %s", cfg.name)
    return summary


def format_summary(summary: RunSummary) -> str:
    lines = [f"{summary.run} ({summary.protocol}): best test accuracy, mean ± std over seeds"]
    for m in summary.methods:
        teacher = "" if m.teacher_acc is None else f"  teacher {percent(m.teacher_acc)}"
        lines.append(f"  {m.method:<24} {percent(m.mean)} ± {percent(m.std)}  (n={len(m.seeds)}){teacher}")
    return "\n".join(lines)


def cmd_run(args: argparse.Namespace) -> int:
    if not args.config:
        raise UsageError("run needs --config PATH")
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out is not None:
        updates["output_dir"] = Path(args.out)
    if args.parallel is not None:
        updates["parallel"] = args.parallel
    if updates:
        cfg = cfg.with_overrides(**updates)
    _check_inputs(cfg)
    for label, cell in expand_grid(cfg):
        if label:
            logger.info("grid cell %s", label)
        print(format_summary(run_experiment(cell)))
    return EXIT_OK


#########################  inspect-soft-targets  ##############################


def _parse_floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise UsageError("expected at least one value")
    return values


def soft_target_table(
    distributions: dict[float, np.ndarray], labels: np.ndarray
) -> list[str]:
    """TSV rows: tau, sample, label, p_0..p_{K-1}, uniform 1/K and KL(u, p_tau)."""
    k = next(iter(distributions.values())).shape[-1]
    u = uniform(k)
    header = ["tau", "sample", "label", *(f"p{i}" for i in range(k)), "uniform", "kl_uniform"]
    rows = ["\t".join(header)]
    for tau, probs in distributions.items():
        for i, (p, y) in enumerate(zip(probs, labels)):
            with np.errstate(divide="ignore"):
                kl = float(np.sum(u * (np.log(u) - np.log(p))))
            cells = [f"{tau:g}", str(i), str(int(y)), *(f"{v:.6g}" for v in p), f"{1.0 / k:.6g}", f"{kl:.6g}"]
            rows.append("\t".join(cells))
    return rows


def cmd_inspect(args: argparse.Namespace) -> int:
    taus = _parse_floats(args.taus) if args.taus else list(DEFAULT_TAUS)
    if args.virtual is not None:
        if args.num_classes is None:
            raise UsageError("--virtual needs --num-classes")
        labels = np.array([int(v) for v in _parse_floats(args.labels or "0")], dtype=np.int64)
        dists = {tau: soften_virtual_teacher(labels, args.num_classes, args.virtual, tau) for tau in taus}
    elif args.checkpoint is not None:
        if not args.config:
            raise UsageError("--checkpoint needs --config to pick the sample source")
        cfg = load_config(args.config)
        model = load_checkpoint(args.checkpoint)
        _, test = cfg.dataset.load(split_seed(cfg.seeds[0]).data)
        if test.num_classes != model.descriptor.num_classes:
            raise ShapeError(
                f"checkpoint has K={model.descriptor.num_classes}, samples have K={test.num_classes}"
            )
        n = min(args.samples, len(test))
        features = test.features[:n].reshape((n, *model.descriptor.input_shape))
        labels = test.labels[:n]
        with no_grad():
            logits = model(features).data
        dists = {tau: softmax_temperature(logits, tau) for tau in taus}
    else:
        raise UsageError("inspect-soft-targets needs --checkpoint or --virtual")
    text = "\n".join(soft_target_table(dists, labels)) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        logger.info("wrote %s", args.output)
    else:
        print(text, end="")
    return EXIT_OK


#############################  compare  #######################################


def cmd_compare(args: argparse.Namespace) -> int:
    paths = [Path(p) / "summary.json" if Path(p).is_dir() else Path(p) for p in args.summaries]
    try:
        summaries = [read_summary(p) for p in paths]
    except (OSError, msgspec.DecodeError) as exc:
        raise UsageError(f"cannot read summary: {exc}") from exc
    try:
        print(format_compare_table(summaries), end="")
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    return EXIT_OK


##############################  preset  #######################################


def cmd_preset(args: argparse.Namespace) -> int:
    if args.list or not args.name:
        for name in presets.available():
            print(f"{name}\t{presets.PRESETS[name].summary}")
        return EXIT_OK
    text = presets.render_preset(args.name)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


##############################  checks  #######################################


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = checks.run_gradcheck(seed=args.seed or 0)
    print(checks.report(results))
    return EXIT_OK if checks.all_passed(results) else EXIT_FAILURE


def cmd_verify(args: argparse.Namespace) -> int:
    results = checks.run_identity_checks(seed=args.seed or 0)
    print(checks.report(results))
    return EXIT_OK if checks.all_passed(results) else EXIT_FAILURE


##############################  main  #########################################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillkit", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", type=Path, help="experiment TOML file")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--out", help="output root (default: $DISTILLKIT_OUT or ./runs)")
    run.add_argument("--parallel", type=int, help="worker processes for independent seeds")
    run.set_defaults(func=cmd_run)

    inspect = sub.add_parser("inspect-soft-targets", help="tabulate softened targets per temperature")
    inspect.add_argument("--checkpoint", type=Path, help="teacher checkpoint to inspect")
    inspect.add_argument("--config", type=Path, help="config whose test split supplies samples")
    inspect.add_argument("--samples", type=int, default=5)
    inspect.add_argument("--virtual", type=float, metavar="A", help="virtual teacher with correct-class probability A")
    inspect.add_argument("--num-classes", type=int)
    inspect.add_argument("--labels", help="comma-separated labels for the virtual teacher")
    inspect.add_argument("--taus", help="comma-separated temperatures (default 1,5,10,20,50,100)")
    inspect.add_argument("--output", help="write the table here instead of stdout")
    inspect.set_defaults(func=cmd_inspect)

    compare = sub.add_parser("compare", help="baseline-plus-delta table from summaries")
    compare.add_argument("summaries", nargs="+", help="summary.json files or run directories")
    compare.set_defaults(func=cmd_compare)

    preset = sub.add_parser("preset", help="print a shipped preset")
    preset.add_argument("name", nargs="?")
    preset.add_argument("--list", action="store_true")
    preset.add_argument("--output")
    preset.set_defaults(func=cmd_preset)

    for name, func, help_text in (
        ("gradcheck", cmd_gradcheck, "finite-difference gradient suite"),
        ("verify-identities", cmd_verify, "exact identity suite"),
    ):
        check = sub.add_parser(name, help=help_text)
        check.add_argument("--seed", type=int, default=0)
        check.set_defaults(func=func)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _fail(code: int, message: str) -> int:
    logger.error("%s", message)
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if getattr(args, "parallel", None) is not None and args.parallel < 1:
        return _fail(EXIT_USAGE, "--parallel must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (DistillKitError, OSError, msgspec.DecodeError) as exc:
        return _fail(EXIT_FAILURE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
