"""Strict JSON run configuration: defaults, deep merge, and key-path validation."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .backbone import BackboneSpec, PRESETS, make_spec, preset
from .head import DecodeConfig, NeckSpec
from .losses import LossWeights
from .model import ModelConfig
from .pillars import ConfigError, PillarGridConfig
from .train import TrainConfig

DEFAULTS = {
    "grid": {
        "x_range": [-54.0, 54.0], "y_range": [-54.0, 54.0], "z_range": [-5.0, 3.0],
        "pillar_size": [0.15, 0.15], "max_points_per_pillar": 20, "max_pillars": 30000,
    },
    "backbone": {"preset": "tiny"},
    "encoder": {"avg_pool": True, "z_offset": True, "z_center": "pillar"},
    "neck": {"lateral_channels": 128, "out_channels": 384},
    "head": {"channels": 64, "num_classes": 3},
    "decode": {"score_threshold": 0.2, "alpha": 0.5, "top_k": 500, "nms_iou": 0.2, "max_detections": 200},
    "train": {
        "epochs": 20, "fade_epochs": 5, "peak_lr": 1e-3, "weight_decay": 0.01,
        "momentum_range": [0.85, 0.95], "beta2": 0.999, "batch_size": 4, "seed": 0, "copy_paste": 1,
        "grad_clip": 35.0, "eval_every": 1, "checkpoint_every": 5, "iou_encoding": "raw",
        "loss_weights": {"cls": 1.0, "iou": 1.0, "reg": 0.25},
    },
    "data": {"train_dir": None, "val_dir": None, "seed": 0, "n_train": 64, "n_val": 16},
}

TOY_OVERRIDES = {
    "grid": {"x_range": [-7.2, 7.2], "y_range": [-7.2, 7.2], "max_pillars": 9216},
    "neck": {"lateral_channels": 32, "out_channels": 64},
    "head": {"channels": 32},
}

# keys whose value is an open mapping rather than a fixed schema
_FREE_FORM = {("backbone",)}
_NULLABLE = {("data", "train_dir"), ("data", "val_dir")}


def _type_ok(default, value):
    if default is None:
        return value is None or isinstance(value, str)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and len(value) == len(default)
    return isinstance(value, type(default))


def merge(base, override, path=()):
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{'.'.join(path) or '<root>'}: expected an object")
    for key, value in override.items():
        here = path + (key,)
        dotted = ".".join(here)
        if path in _FREE_FORM or here in _FREE_FORM:
            out[key] = copy.deepcopy(value)
            continue
        if key not in base:
            raise ConfigError(f"{dotted}: unknown key")
        if isinstance(base[key], dict):
            out[key] = merge(base[key], value, here)
        elif here in _NULLABLE:
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{dotted}: expected a path string or null")
            out[key] = value
        elif not _type_ok(base[key], value):
            raise ConfigError(f"{dotted}: expected {type(base[key]).__name__}, got {json.dumps(value)}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def backbone_from(section):
    """A BackboneSpec from {"preset": name} or an explicit stage list."""
    section = dict(section)
    if "preset" in section:
        name = section.pop("preset")
        if section:
            raise ConfigError(f"backbone.{sorted(section)[0]}: not allowed together with backbone.preset")
        if name not in PRESETS:
            raise ConfigError(f"backbone.preset: unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        return preset(name)
    if "blocks" in section:
        allowed = {"blocks", "channels", "in_channels", "stage1_downsample"}
        extra = sorted(set(section) - allowed)
        if extra:
            raise ConfigError(f"backbone.{extra[0]}: unknown key")
        if "channels" not in section or len(section["channels"]) != len(section["blocks"]):
            raise ConfigError("backbone.channels: one channel count per stage is required")
        return make_spec(section["blocks"], section["channels"], section.get("in_channels"),
                         bool(section.get("stage1_downsample", False)))
    try:
        return BackboneSpec.from_dict(section)
    except TypeError as e:
        raise ConfigError(f"backbone: {e}") from None


class RunConfig:
    """Merged configuration; ``raw`` is the exact dict written to run directories."""

    def __init__(self, raw):
        self.raw = raw
        try:
            g = raw["grid"]
            self.grid = PillarGridConfig(out_channels=64, **g)
            self.backbone = backbone_from(raw["backbone"])
            self.neck = NeckSpec(**raw["neck"])
            self.decode = DecodeConfig(**raw["decode"])
            t = dict(raw["train"])
            t["loss_weights"] = LossWeights(**t["loss_weights"])
            self.train = TrainConfig(**t)
            enc = raw["encoder"]
            if enc["z_center"] not in ("pillar", "points"):
                raise ConfigError(f"encoder.z_center: expected 'pillar' or 'points', got {enc['z_center']!r}")
            self.model = ModelConfig(grid=self.grid, backbone=self.backbone, neck=self.neck,
                                     head_channels=raw["head"]["channels"], num_classes=raw["head"]["num_classes"],
                                     avg_pool=enc["avg_pool"], z_offset=enc["z_offset"], z_center=enc["z_center"],
                                     decode=self.decode)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        self.data = raw["data"]

    @classmethod
    def from_dict(cls, override=None, toy=False, preset_name=None):
        base = merge(DEFAULTS, TOY_OVERRIDES) if toy else DEFAULTS
        raw = merge(base, override or {})
        if preset_name is not None:
            raw["backbone"] = {"preset": preset_name}
        return cls(raw)

    @classmethod
    def load(cls, path, toy=False, preset_name=None):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc, toy=toy, preset_name=preset_name)

    def dumps(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)
