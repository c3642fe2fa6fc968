"""Per-seed experiment pipeline.

One invocation runs one seed of an experiment: load the data, route on the
protocol to the node that trains it, then record metrics and checkpoints.

    graph.invoke({"seed": 0}, {"configurable": {"experiment": cfg}})
"""

import logging
from pathlib import Path

from langchain_core.runnables import RunnableConfig
from langgraph.graph import StateGraph

from distillkit import trainer
from distillkit.configuration import ExperimentConfig, GraphConfiguration
from distillkit.nn import save_checkpoint
from distillkit.state import ExperimentState
from distillkit.utils import split_seed, write_metrics

logger = logging.getLogger(__name__)


def _experiment(config: RunnableConfig) -> ExperimentConfig:
    return GraphConfiguration.from_runnable_config(config).experiment


def _datasets(state: ExperimentState):
    if state.train is None or state.test is None:
        raise RuntimeError("load_data must run before training")
    return state.train, state.test


def load_data(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Load the train/test splits with the data seed split from the run seed."""
    cfg = _experiment(config)
    train_set, test_set = cfg.dataset.load(split_seed(state.seed).data)
    logger.info(
        "%s seed %d: %s on %d train / %d test examples",
        cfg.name,
        state.seed,
        cfg.protocol,
        len(train_set),
        len(test_set),
    )
    return {"protocol": cfg.protocol, "train": train_set, "test": test_set}


def train_baseline(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Cross-entropy or label-smoothing training from scratch."""
    cfg = _experiment(config)
    result = trainer.run_baseline(cfg, state.seed, *_datasets(state))
    return {"results": [result]}


def distill_from_teacher(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Normal KD or Re-KD against the configured teacher checkpoint."""
    cfg = _experiment(config)
    if cfg.protocol == "re-kd":
        result = trainer.run_re_kd(cfg, state.seed, *_datasets(state))
    else:
        result = trainer.run_normal_kd(cfg, state.seed, *_datasets(state))
    return {"results": [result]}


def distill_from_snapshots(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """De-KD once per snapshot teacher."""
    cfg = _experiment(config)
    return {"results": trainer.de_kd_curve(cfg, state.seed, *_datasets(state))}


def self_distill(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Stage-1 baseline followed by self-distillation."""
    cfg = _experiment(config)
    stage1, distilled = trainer.run_tf_self(
        cfg, state.seed, *_datasets(state), cache_dir=cfg.run_dir / "cache"
    )
    return {"results": [stage1, distilled]}


def virtual_teacher_distill(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Training regularised by the virtual teacher."""
    cfg = _experiment(config)
    return {"results": [trainer.run_tf_reg(cfg, state.seed, *_datasets(state))]}


def record(state: ExperimentState, *, config: RunnableConfig) -> dict:
    """Write the seed's metrics file and its final and snapshot checkpoints."""
    cfg = _experiment(config)
    run_dir = cfg.run_dir
    outputs: list[Path] = [
        write_metrics(
            run_dir / f"metrics-seed{state.seed}.jsonl",
            cfg.name,
            [result.history for result in state.results],
        )
    ]
    ckpt_dir = run_dir / "checkpoints" / f"seed{state.seed}"
    for result in state.results:
        method = result.history.method
        outputs.append(save_checkpoint(result.final, ckpt_dir / f"{method}-final.ckpt"))
        for epoch, snapshot in sorted(result.snapshots.items()):
            outputs.append(save_checkpoint(snapshot, ckpt_dir / f"{method}-snapshot-e{epoch}.ckpt"))
    logger.info("%s seed %d: wrote %d files under %s", cfg.name, state.seed, len(outputs), run_dir)
    return {"outputs": [str(p) for p in outputs]}


# Routing Functions
def route_protocol(state: ExperimentState) -> str:
    """Route to the training node that implements the protocol."""
    protocol = state.protocol
    if protocol in ("baseline", "lsr"):
        return "train_baseline"
    elif protocol in ("kd", "re-kd"):
        return "distill_from_teacher"
    elif protocol == "de-kd":
        return "distill_from_snapshots"
    elif protocol == "tf-self":
        return "self_distill"
    elif protocol == "tf-reg":
        return "virtual_teacher_distill"
    raise ValueError(f"unknown protocol: {protocol!r}")


builder = StateGraph(ExperimentState, config_schema=GraphConfiguration)

builder.add_node("load_data", load_data)
builder.add_node("train_baseline", train_baseline)
builder.add_node("distill_from_teacher", distill_from_teacher)
builder.add_node("distill_from_snapshots", distill_from_snapshots)
builder.add_node("self_distill", self_distill)
builder.add_node("virtual_teacher_distill", virtual_teacher_distill)
builder.add_node("record", record)

builder.add_edge("__start__", "load_data")
builder.add_conditional_edges(
    "load_data",
    route_protocol,
    {
        "train_baseline": "train_baseline",
        "distill_from_teacher": "distill_from_teacher",
        "distill_from_snapshots": "distill_from_snapshots",
        "self_distill": "self_distill",
        "virtual_teacher_distill": "virtual_teacher_distill",
    },
)
for _node in (
    "train_baseline",
    "distill_from_teacher",
    "distill_from_snapshots",
    "self_distill",
    "virtual_teacher_distill",
):
    builder.add_edge(_node, "record")
builder.add_edge("record", "__end__")

graph = builder.compile()
graph.name = "ExperimentGraph"


def run_seed(cfg: ExperimentConfig, seed: int) -> list[str]:
    """Run one seed through the graph and return the files it wrote."""
    final = graph.invoke({"seed": seed}, {"configurable": {"experiment": cfg}})
    return list(final["outputs"])
