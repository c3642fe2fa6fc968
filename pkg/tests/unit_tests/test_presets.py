import pytest

from distillkit import presets
from distillkit.configuration import parse_config
from distillkit.errors import ConfigError


def test_published_hyperparameters() -> None:
    cfg = presets.preset("tfself-cifar100-mobilenetv2")
    assert (cfg.protocol, cfg.loss.alpha, cfg.loss.tau) == ("tf-self", 0.95, 20.0)

    cfg = presets.preset("tfreg-imagenet")
    assert (cfg.protocol, cfg.loss.tau, cfg.loss.alpha, cfg.loss.a) == ("tf-reg", 20.0, 0.1, 0.99)
    assert cfg.optim.ref_batch == 256

    cfg = presets.preset("dekd-cifar100-resnet18-teacher")
    assert (cfg.protocol, cfg.loss.tau, cfg.loss.alpha) == ("de-kd", 20.0, 0.95)
    assert cfg.teacher.checkpoint is not None
    assert cfg.teacher.checkpoint.name == "baseline-snapshot-e1.ckpt"

    cfg = presets.preset("tfreg-cifar100-mobilenetv2")
    assert (cfg.loss.tau, cfg.loss.alpha) == (40.0, 0.95)


def test_every_preset_validates() -> None:
    for name in presets.available():
        cfg = presets.preset(name)
        assert cfg.name == name
        assert cfg.seeds == presets.DESK_SEEDS


def test_desk_de_kd_curve_uses_every_snapshot() -> None:
    cfg = presets.preset("dekd-desk")
    assert [p.name for p in cfg.teacher.paths()] == [
        f"baseline-snapshot-e{e}.ckpt" for e in (1, 2, 5, 10, 20)
    ]
    assert presets.preset("baseline-desk-large").training.snapshot_epochs == [1, 2, 5, 10, 20]


def test_unknown_preset_lists_available() -> None:
    with pytest.raises(ConfigError, match="tfreg-desk"):
        presets.preset("no-such-preset")


def test_render_preset_marks_substitutions_and_parses() -> None:
    text = presets.render_preset("kd-cifar10-resnet18-plaincnn")
    assert "DESK-SCALE SUBSTITUTIONS" in text
    assert "plaincnn" in text
    assert "SGD lr 0.05" in text
    cfg = parse_config(text)
    assert cfg == presets.preset("kd-cifar10-resnet18-plaincnn")
    assert cfg.model.arch == "plain_cnn"
