"""Large-kernel ConvNet backbones for pseudo-images, with exact size accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm2d, Module, ModuleList, Parameter
from .pillars import ConfigError


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    kernel: int = 7
    expansion: int = 4
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ConfigError(f"block kernel must be odd, got {self.kernel}")
        if self.expansion < 1:
            raise ConfigError("block expansion must be >= 1")


@dataclass(frozen=True)
class StageSpec:
    n_blocks: int
    channels: int
    downsample: bool


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple
    in_channels: int
    kernel: int = 7
    expansion: int = 4
    layer_scale_init: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages))
        if len(self.stages) < 3:
            raise ConfigError("a backbone needs at least three stages to feed the neck")
        if self.stages[0].channels != self.in_channels and not self.stages[0].downsample:
            raise ConfigError(f"stage-1 channels {self.stages[0].channels} != in_channels {self.in_channels}")
        if any(s.n_blocks < 0 for s in self.stages):
            raise ConfigError("block counts must be >= 0")
        BlockSpec(self.in_channels, self.kernel, self.expansion, self.layer_scale_init)

    @property
    def strides(self):
        out, s = [], 1
        for st in self.stages:
            if st.downsample:
                s *= 2
            out.append(s)
        return tuple(out)

    @property
    def pyramid_strides(self):
        return self.strides[-3:]

    def to_dict(self):
        return {"in_channels": self.in_channels, "kernel": self.kernel, "expansion": self.expansion,
                "layer_scale_init": self.layer_scale_init,
                "stages": [{"n_blocks": s.n_blocks, "channels": s.channels, "downsample": s.downsample}
                           for s in self.stages]}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "tiny": ((2, 2, 1, 1, 1), (48, 96, 96, 96, 96)),
    "small": ((3, 3, 2, 1, 1), (48, 192, 192, 192, 192)),
    "base": ((4, 4, 2, 2, 1), (64, 192, 384, 384, 384)),
    "large": ((6, 6, 4, 2, 2), (96, 192, 384, 384, 384)),
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    blocks, chans = PRESETS[name]
    stages = tuple(StageSpec(b, c, i > 0) for i, (b, c) in enumerate(zip(blocks, chans)))
    return BackboneSpec(stages, chans[0])


def make_spec(blocks, channels, in_channels=None, stage1_downsample=False):
    """Explicit spec; stage i > 1 always halves resolution."""
    stages = tuple(StageSpec(b, c, (i > 0) or stage1_downsample)
                   for i, (b, c) in enumerate(zip(blocks, channels)))
    return BackboneSpec(stages, in_channels or channels[0])


class Block(Module):
    """depthwise kxk -> LN -> 1x1 (x4) -> GELU -> 1x1 -> layer scale -> + input."""

    def __init__(self, channels, kernel=7, expansion=4, layer_scale_init=1e-6):
        super().__init__()
        self.dwconv = Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels)
        self.norm = LayerNorm2d(channels)
        self.pwconv1 = Conv2d(channels, expansion * channels, 1)
        self.pwconv2 = Conv2d(expansion * channels, channels, 1)
        self.gamma = Parameter(np.full(channels, layer_scale_init))

    def forward(self, x):
        y = self.dwconv(x)
        y = self.norm(y)
        y = T.gelu(self.pwconv1(y))
        y = self.pwconv2(y)
        y = y * T.reshape(self.gamma, (1, -1, 1, 1))
        return x + y


class Downsample(Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm = LayerNorm2d(in_ch)
        self.conv = Conv2d(in_ch, out_ch, 2, stride=2)

    def forward(self, x):
        return self.conv(self.norm(x))


class Stage(Module):
    def __init__(self, in_ch, spec, bspec):
        super().__init__()
        if spec.downsample:
            self.downsample = Downsample(in_ch, spec.channels)
        elif in_ch != spec.channels:
            raise ConfigError(f"stage without downsampling cannot change channels {in_ch}->{spec.channels}")
        else:
            self.downsample = None
        self.blocks = ModuleList(Block(spec.channels, bspec.kernel, bspec.expansion, bspec.layer_scale_init)
                                 for _ in range(spec.n_blocks))

    def forward(self, x):
        if self.downsample is not None:
            x = self.downsample(x)
        for b in self.blocks:
            x = b(x)
        return x


class Backbone(Module):
    """Returns the outputs of the last three stages (the feature pyramid)."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        bspec = BlockSpec(spec.in_channels, spec.kernel, spec.expansion, spec.layer_scale_init)
        self.stages = ModuleList()
        prev = spec.in_channels
        for st in spec.stages:
            self.stages.append(Stage(prev, st, bspec))
            prev = st.channels

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(f"pseudo-image has {x.shape[1]} channels, backbone expects {self.spec.in_channels}")
        s = self.spec.strides[-1]
        if x.shape[2] % s or x.shape[3] % s:
            raise ConfigError(f"input {x.shape[2]}x{x.shape[3]} is not divisible by the total stride {s}")
        outs = []
        for st in self.stages:
            x = st(x)
            outs.append(x)
        return outs[-3:]


def block_params(c, kernel=7, expansion=4):
    e = expansion * c
    return kernel * kernel * c + c + 2 * c + (c * e + e) + (e * c + c) + c


def downsample_params(cin, cout):
    return 2 * cin + 4 * cin * cout + cout


def count_params(spec):
    total, prev = 0, spec.in_channels
    for st in spec.stages:
        if st.downsample:
            total += downsample_params(prev, st.channels)
        total += st.n_blocks * block_params(st.channels, spec.kernel, spec.expansion)
        prev = st.channels
    return total


def count_flops(spec, input_hw):
    """Multiply-accumulates of all convolutions for one input (1 MAC = 1 FLOP)."""
    h, w = (input_hw, input_hw) if np.isscalar(input_hw) else input_hw
    s = spec.strides[-1]
    if h % s or w % s:
        raise ConfigError(f"input {h}x{w} is not divisible by the total stride {s}")
    total, prev = 0, spec.in_channels
    k, e = spec.kernel, spec.expansion
    for st in spec.stages:
        c = st.channels
        if st.downsample:
            h, w = h // 2, w // 2
            total += h * w * 4 * prev * c
        total += st.n_blocks * h * w * (k * k * c + 2 * e * c * c)
        prev = c
    return total


def stage_table(spec, input_hw):
    rows, h, prev = [], input_hw, spec.in_channels
    for i, st in enumerate(spec.stages, 1):
        if st.downsample:
            h //= 2
        rows.append({"stage": i, "output": f"{h}x{h}", "channels": st.channels, "blocks": st.n_blocks,
                     "downsample": st.downsample})
        prev = st.channels
    return rows
