"""The full detector: pillar encoder -> backbone -> neck -> head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneSpec, count_flops, count_params, preset
from .head import HEATMAP_PRIOR_BIAS, DecodeConfig, DetectionHead, Neck, NeckSpec, decode
from .nn import Module, init_parameters
from .pillars import (ConfigError, PillarEncoder, PillarGridConfig, collate, decorate, grid_shape,
                      pillarize)


def toy_grid():
    """96 x 96 grid over [-7.2, 7.2] m with 0.15 m pillars."""
    return PillarGridConfig(x_range=(-7.2, 7.2), y_range=(-7.2, 7.2), z_range=(-5.0, 3.0),
                            pillar_size=(0.15, 0.15), max_points_per_pillar=20, max_pillars=9216)


@dataclass
class ModelConfig:
    grid: PillarGridConfig = field(default_factory=PillarGridConfig)
    backbone: BackboneSpec = field(default_factory=lambda: preset("tiny"))
    neck: NeckSpec = field(default_factory=NeckSpec)
    head_channels: int = 64
    num_classes: int = 3
    avg_pool: bool = True
    z_offset: bool = True
    z_center: str = "pillar"
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        H, W = grid_shape(self.grid)
        s = self.backbone.strides[-1]
        if H % s or W % s:
            raise ConfigError(f"grid {H}x{W} is not divisible by the backbone's total stride {s}")
        if H % self.neck.out_stride or W % self.neck.out_stride:
            raise ConfigError(f"grid {H}x{W} is not divisible by the head stride {self.neck.out_stride}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "backbone": self.backbone.to_dict(), "neck": self.neck.to_dict(),
                "head_channels": self.head_channels, "num_classes": self.num_classes,
                "avg_pool": self.avg_pool, "z_offset": self.z_offset, "z_center": self.z_center,
                "decode": self.decode.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(grid=PillarGridConfig(**d.pop("grid")), backbone=BackboneSpec.from_dict(d.pop("backbone")),
                   neck=NeckSpec(**d.pop("neck")), decode=DecodeConfig(**d.pop("decode")), **d)


class PillarNeSt(Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        spec = config.backbone
        # the encoder width is set by the backbone's input channels
        self.encoder = PillarEncoder(spec.in_channels, config.avg_pool, config.z_offset)
        self.backbone = Backbone(spec)
        pyr = spec.stages[-3:]
        self.neck = Neck([s.channels for s in pyr], spec.pyramid_strides, config.neck)
        self.head = DetectionHead(config.neck.out_channels, config.num_classes, config.head_channels)

    @property
    def stride(self):
        return self.config.neck.out_stride

    def initialize(self, rng):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        init_parameters(self, rng, overrides={"gamma": self.config.backbone.layer_scale_init,
                                              "heatmap.out.bias": HEATMAP_PRIOR_BIAS})
        return self

    def make_batch(self, clouds, rngs=None):
        cfg = self.config
        pts = [pillarize(c, cfg.grid, None if rngs is None else rngs[i]) for i, c in enumerate(clouds)]
        zc = cfg.z_center if cfg.z_offset else None
        return collate([decorate(p, cfg.grid, zc) for p in pts], pts)

    def forward(self, batch):
        x = self.encoder(batch, grid_shape(self.config.grid))
        return self.head(self.neck(self.backbone(x)))

    def detect(self, clouds, decode_config=None):
        """Decoded boxes for each cloud, without building a gradient graph."""
        with T.no_grad():
            out = self.forward(self.make_batch(clouds))
        dc = decode_config or self.config.decode
        return [decode(*out.scene(i), self.config.grid, dc, self.stride) for i in range(len(clouds))]

    def summary(self, input_hw=None):
        spec = self.config.backbone
        hw = input_hw or grid_shape(self.config.grid)
        return {"backbone_params": count_params(spec), "backbone_flops": count_flops(spec, hw),
                "total_params": self.num_parameters()}
