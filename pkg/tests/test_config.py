import json

import pytest

from pillarnest.backbone import preset
from pillarnest.config import DEFAULTS, RunConfig, backbone_from, merge
from pillarnest.pillars import ConfigError


def test_defaults_build():
    cfg = RunConfig.from_dict()
    assert cfg.backbone == preset("tiny")
    assert cfg.model.grid.x_range == (-54.0, 54.0)
    assert cfg.train.loss_weights.reg == 0.25 and cfg.decode.alpha == 0.5


def test_toy_overrides_and_preset():
    cfg = RunConfig.from_dict(toy=True, preset_name="small")
    assert cfg.grid.x_range == (-7.2, 7.2) and cfg.neck.out_channels == 64
    assert cfg.backbone == preset("small")


def test_nested_override_keeps_siblings():
    cfg = RunConfig.from_dict({"train": {"loss_weights": {"reg": 0.5}}})
    assert cfg.train.loss_weights.cls == 1.0 and cfg.train.loss_weights.reg == 0.5


@pytest.mark.parametrize("override, path", [
    ({"trian": {}}, "trian"),
    ({"train": {"lr": 1.0}}, "train.lr"),
    ({"train": {"loss_weights": {"box": 1.0}}}, "train.loss_weights.box"),
    ({"train": {"epochs": "ten"}}, "train.epochs"),
    ({"train": {"epochs": 2.5}}, "train.epochs"),
    ({"encoder": {"avg_pool": 1}}, "encoder.avg_pool"),
    ({"grid": {"x_range": [1.0]}}, "grid.x_range"),
    ({"data": {"train_dir": 3}}, "data.train_dir"),
    ({"encoder": {"z_center": "top"}}, "encoder.z_center"),
    ({"backbone": {"preset": "huge"}}, "backbone.preset"),
    ({"backbone": {"preset": "tiny", "blocks": [1]}}, "backbone.blocks"),
    ({"backbone": {"blocks": [1, 1, 1], "channels": [8, 8]}}, "backbone.channels"),
])
def test_errors_name_the_key_path(override, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        RunConfig.from_dict(override)


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError, match="fade_epochs"):
        RunConfig.from_dict({"train": {"epochs": 2}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"grid": {"pillar_size": [0.7, 0.7]}})


def test_explicit_backbone():
    spec = backbone_from({"blocks": [1, 1, 1, 1], "channels": [32, 64, 64, 64], "stage1_downsample": True})
    assert spec.strides == (2, 4, 8, 16) and spec.in_channels == 32
    cfg = RunConfig.from_dict({"backbone": spec.to_dict()})
    assert cfg.backbone == spec


def test_snapshot_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"train": {"epochs": 7}}, toy=True)
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    again = RunConfig.load(p)
    assert again.raw == cfg.raw and again.dumps() == cfg.dumps()


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)


def test_merge_does_not_mutate_defaults():
    before = json.dumps(DEFAULTS, sort_keys=True)
    merge(DEFAULTS, {"train": {"epochs": 99}})
    assert json.dumps(DEFAULTS, sort_keys=True) == before
