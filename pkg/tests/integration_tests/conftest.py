from pathlib import Path

import pytest

from distillkit import trainer
from distillkit.configuration import ExperimentConfig, dump_config

TINY = {
    "name": "tiny",
    "protocol": "baseline",
    "dataset": {"kind": "synth", "num_classes": 3, "n_per_class": 20, "dim": 4, "spread": 0.3, "seed": 0},
    "model": {"arch": "mlp", "input_shape": [4], "num_classes": 3, "widths": [4, 16, 3]},
    "loss": {"alpha": 0.5, "tau": 4.0},
    "optim": {"lr0": 0.1, "milestones": [2], "decay_factor": 0.2},
    "training": {"epochs": 3, "batch_size": 16},
    "seeds": [0],
}


@pytest.fixture(autouse=True)
def _fresh_stage1_cache():
    trainer.clear_stage1_cache()
    yield
    trainer.clear_stage1_cache()


@pytest.fixture
def tiny_config(tmp_path: Path):
    """Factory for a few-second experiment writing under ``tmp_path``."""

    def make(**updates) -> ExperimentConfig:
        data = {**TINY, "output_dir": str(tmp_path / "runs")}
        for key, value in updates.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)

    return make


@pytest.fixture
def write_config(tmp_path: Path):
    """Write a config as TOML and return its path."""

    def write(cfg: ExperimentConfig, name: str = "experiment.toml") -> Path:
        path = tmp_path / name
        path.write_text(dump_config(cfg))
        return path

    return write
