from pathlib import Path

import pytest

from distillkit.configuration import (
    ExperimentConfig,
    GraphConfiguration,
    dump_config,
    expand_grid,
    load_config,
    parse_config,
)
from distillkit.errors import ConfigError

BASELINE_TOML = """
name = "blobs"
protocol = "baseline"
seeds = [0, 1, 2]

[dataset]
kind = "synth"
num_classes = 3
dim = 4

[model]
input_shape = [4]
num_classes = 3
widths = [4, 8, 3]

[training]
epochs = 2
batch_size = 16
"""


def test_configuration_from_runnable_config() -> None:
    cfg = ExperimentConfig()
    graph_cfg = GraphConfiguration.from_runnable_config({"configurable": {"experiment": cfg, "user_id": "foo"}})
    assert graph_cfg.experiment is cfg


def test_configuration_accepts_plain_mapping() -> None:
    graph_cfg = GraphConfiguration.from_runnable_config(
        {"configurable": {"experiment": {"name": "x", "protocol": "lsr"}}}
    )
    assert graph_cfg.experiment.protocol == "lsr"


def test_configuration_from_none() -> None:
    with pytest.raises(ConfigError):
        GraphConfiguration.from_runnable_config({"configurable": {"user_id": "foo"}})


def test_parse_config() -> None:
    cfg = parse_config(BASELINE_TOML)
    assert cfg.seeds == [0, 1, 2]
    assert cfg.model.to_descriptor().widths == (4, 8, 3)
    assert cfg.loss_spec().kind == "ce"
    assert cfg.run_dir.name == "blobs"


def test_dump_config_reads_back_unchanged() -> None:
    cfg = parse_config(BASELINE_TOML)
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize(
    "extra, field",
    [
        ('protocol = "kd"', "teacher.checkpoint"),
        ('protocol = "tf-reg"', "loss.a"),
        ('protocol = "de-kd"', "teacher.checkpoint"),
    ],
)
def test_protocol_requirements_name_the_field(extra: str, field: str) -> None:
    text = BASELINE_TOML.replace('protocol = "baseline"', extra)
    with pytest.raises(ConfigError, match=field):
        parse_config(text)


def test_invalid_configs() -> None:
    with pytest.raises(ConfigError, match="unknown_key"):
        parse_config(BASELINE_TOML + "\nunknown_key = 1\n")
    with pytest.raises(ConfigError, match="seeds"):
        parse_config(BASELINE_TOML.replace("seeds = [0, 1, 2]", "seeds = []"))
    with pytest.raises(ConfigError, match="num_classes"):
        parse_config(BASELINE_TOML.replace("num_classes = 3\ndim", "num_classes = 4\ndim"))
    with pytest.raises(ConfigError, match="invalid TOML"):
        parse_config("name = ")
    with pytest.raises(ConfigError, match="not found"):
        load_config(Path("/nonexistent/experiment.toml"))


def test_tf_reg_needs_a_confident_virtual_teacher() -> None:
    with pytest.raises(ConfigError, match="a >= 0.9"):
        parse_config(BASELINE_TOML.replace('protocol = "baseline"', 'protocol = "tf-reg"') + "\n[loss]\na = 0.5\n")


def test_expand_grid(tmp_path) -> None:
    cfg = parse_config(BASELINE_TOML.replace('protocol = "baseline"', 'protocol = "tf-reg"') + "\n[loss]\na = 0.99\n")
    assert expand_grid(cfg) == [("", cfg)]
    cfg = cfg.with_overrides(
        output_dir=tmp_path, grid={"alpha": [0.1, 0.5], "tau": [20.0], "a": [0.5, 0.99]}
    )
    cells = expand_grid(cfg)
    assert [label for label, _ in cells] == ["alpha0.1-tau20-a0.99", "alpha0.5-tau20-a0.99"]
    label, cell = cells[1]
    assert cell.loss.alpha == 0.5 and cell.loss.a == 0.99
    assert cell.run_dir == tmp_path / "blobs" / f"grid-{label}"
    assert cell.grid.empty


def test_expand_grid_with_no_valid_cell() -> None:
    cfg = parse_config(BASELINE_TOML.replace('protocol = "baseline"', 'protocol = "tf-reg"') + "\n[loss]\na = 0.99\n")
    with pytest.raises(ConfigError):
        expand_grid(cfg.with_overrides(grid={"a": [0.5, 0.6]}))


def test_default_output_dir_follows_environment(monkeypatch) -> None:
    monkeypatch.setenv("DISTILLKIT_OUT", "/tmp/distillkit-runs")
    assert ExperimentConfig().output_dir == Path("/tmp/distillkit-runs")
