"""Pyramid fusion neck, center-heatmap detection head, box decoding and rotated NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .data import Box3D
from .geometry import bev_iou, may_overlap
from .nn import Conv2d, LayerNorm2d, Module, ModuleList
from .pillars import ConfigError

REG_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
HEATMAP_PRIOR_BIAS = -2.19  # sigmoid ~ 0.1 at init


@dataclass
class NeckSpec:
    lateral_channels: int = 128
    out_channels: int = 384
    out_stride: int = 4

    def __post_init__(self):
        if self.lateral_channels < 1 or self.out_channels < 1 or self.out_stride < 1:
            raise ConfigError("neck widths and stride must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class DecodeConfig:
    score_threshold: float = 0.2
    alpha: float = 0.5
    top_k: int = 500
    nms_iou: float = 0.2
    max_detections: int = 200

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.top_k < 1 or self.max_detections < 1:
            raise ConfigError("top_k and max_detections must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadOutput:
    """Batched head maps. ``heatmap`` and ``iou`` are post-sigmoid."""

    heatmap: T.Tensor  # (N, K, h, w)
    reg: T.Tensor  # (N, 8, h, w)
    iou: T.Tensor  # (N, 1, h, w)
    heatmap_logits: T.Tensor

    def scene(self, i):
        """Numpy maps of one scene, for decoding."""
        return self.heatmap.data[i], self.reg.data[i], self.iou.data[i]


def _resample(x, factor):
    """Nearest upsampling for factor > 1, average pooling for factor < 1."""
    if factor == 1:
        return x
    if factor > 1:
        return T.upsample_nearest(x, int(factor))
    return T.avg_pool(x, int(round(1 / factor)))


class Neck(Module):
    """1x1 laterals, resample every level to ``out_stride``, concatenate, 3x3 fuse."""

    def __init__(self, in_channels, in_strides, spec):
        super().__init__()
        if len(in_channels) != len(in_strides):
            raise ConfigError("one stride per pyramid level is required")
        self.spec = spec
        self.in_strides = tuple(in_strides)
        for s in in_strides:
            ratio = s / spec.out_stride if s >= spec.out_stride else spec.out_stride / s
            if ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
                raise ConfigError(f"pyramid stride {s} is not a power-of-two multiple of {spec.out_stride}")
        self.laterals = ModuleList(Conv2d(c, spec.lateral_channels, 1) for c in in_channels)
        self.fuse = Conv2d(spec.lateral_channels * len(in_channels), spec.out_channels, 3, padding=1)
        self.norm = LayerNorm2d(spec.out_channels)

    def forward(self, pyramid):
        if len(pyramid) != len(self.in_strides):
            raise ConfigError(f"neck expects {len(self.in_strides)} levels, got {len(pyramid)}")
        ref = None
        levels = []
        for x, s, lat in zip(pyramid, self.in_strides, self.laterals):
            hw = (x.shape[2] * s // self.spec.out_stride, x.shape[3] * s // self.spec.out_stride)
            if ref is None:
                ref = hw
            elif hw != ref:
                raise ConfigError(f"pyramid level with stride {s} has inconsistent size {x.shape[2:]}")
            levels.append(_resample(lat(x), s / self.spec.out_stride))
        return T.relu(self.norm(self.fuse(T.concat(levels, axis=1))))


class _Branch(Module):
    def __init__(self, in_ch, mid, out_ch):
        super().__init__()
        self.conv = Conv2d(in_ch, mid, 3, padding=1)
        self.out = Conv2d(mid, out_ch, 1)

    def forward(self, x):
        return self.out(T.relu(self.conv(x)))


class DetectionHead(Module):
    def __init__(self, in_channels, num_classes, channels=64):
        super().__init__()
        self.num_classes = num_classes
        self.shared = Conv2d(in_channels, channels, 3, padding=1)
        self.shared_norm = LayerNorm2d(channels)
        self.heatmap = _Branch(channels, channels, num_classes)
        self.reg = _Branch(channels, channels, REG_CHANNELS)
        self.iou = _Branch(channels, channels, 1)

    def forward(self, x):
        x = T.relu(self.shared_norm(self.shared(x)))
        logits = self.heatmap(x)
        return HeadOutput(T.sigmoid(logits), self.reg(x), T.sigmoid(self.iou(x)), logits)


# ---------------------------------------------------------------- scoring & decoding


def rectify_score(s, c, alpha):
    """Geometric blend of classification score ``s`` and predicted IoU ``c``."""
    s = np.asarray(s, dtype=np.float64)
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.sqrt(np.power(s, 1.0 - alpha) * np.power(c, alpha))


def safe_atan2(s, c):
    return 0.0 if s == 0.0 and c == 0.0 else math.atan2(s, c)


def nms(boxes, iou_threshold):
    """Greedy class-agnostic suppression by descending score; ties keep index order."""
    if not boxes:
        return []
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    params = np.array([b.bev for b in boxes], dtype=np.float64)
    suppressed = np.zeros(len(boxes), bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if not len(rest):
            continue
        near = rest[may_overlap(params, i, rest)]
        for j in near:
            if bev_iou(tuple(params[i]), tuple(params[j])) > iou_threshold:
                suppressed[j] = True
    return [boxes[i] for i in keep]


def decode(heatmap, reg, iou, grid_config, decode_config=None, stride=4):
    """Boxes of one scene from numpy maps heatmap (K,h,w), reg (8,h,w), iou (1,h,w)."""
    cfg = decode_config or DecodeConfig()
    K, h, w = heatmap.shape
    flat = np.asarray(heatmap, dtype=np.float64).reshape(-1)
    k = min(cfg.top_k, flat.size)
    order = np.argsort(-flat, kind="stable")[:k]
    cell_x = stride * grid_config.pillar_size[0]
    cell_y = stride * grid_config.pillar_size[1]
    boxes = []
    for idx in order:
        cls, rem = divmod(int(idx), h * w)
        r, c = divmod(rem, w)
        s = float(flat[idx])
        q = float(np.clip(iou[0, r, c], 0.0, 1.0))
        score = float(rectify_score(s, q, cfg.alpha))
        if score < cfg.score_threshold:
            continue
        v = reg[:, r, c].astype(np.float64)
        x = grid_config.x_range[0] + (c + v[0]) * cell_x
        y = grid_config.y_range[0] + (r + v[1]) * cell_y
        size = np.exp(np.clip(v[3:6], -10.0, 10.0))
        boxes.append(Box3D((x, y, v[2]), tuple(size), safe_atan2(v[6], v[7]), cls, score, q))
    return nms(boxes, cfg.nms_iou)[:cfg.max_detections]
