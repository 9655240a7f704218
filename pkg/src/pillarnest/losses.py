"""Heatmap/regression targets and the weighted detection loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .geometry import bev_iou
from .head import REG_CHANNELS, safe_atan2
from .pillars import ConfigError, grid_shape

PROB_EPS = 1e-4


@dataclass
class LossWeights:
    cls: float = 1.0
    iou: float = 1.0
    reg: float = 0.25

    def __post_init__(self):
        if min(self.cls, self.iou, self.reg) < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


def gaussian_radius(length, width, min_overlap=0.1):
    """Largest center offset (in cells) keeping IoU >= ``min_overlap`` for a box of this footprint."""
    h, w = length, width
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 * b1 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 * b2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gaussian_kernel(radius):
    """(2r+1)^2 window with sigma = (2r+1)/6 and an exact 1 at the centre."""
    d = 2 * radius + 1
    sigma = d / 6.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))


def splat(canvas, row, col, radius):
    """Max-combine a gaussian centred at (row, col) into ``canvas`` in place."""
    g = gaussian_kernel(radius)
    H, W = canvas.shape
    r0, r1 = max(0, row - radius), min(H, row + radius + 1)
    c0, c1 = max(0, col - radius), min(W, col + radius + 1)
    patch = g[r0 - row + radius:r1 - row + radius, c0 - col + radius:c1 - col + radius]
    np.maximum(canvas[r0:r1, c0:c1], patch, out=canvas[r0:r1, c0:c1])


@dataclass
class Targets:
    heatmap: np.ndarray  # (K, h, w)
    reg: np.ndarray  # (8, h, w)
    mask: np.ndarray  # (h, w) bool
    positives: list = field(default_factory=list)  # (row, col, Box3D)
    skipped: int = 0


def encode_targets(boxes, grid_config, num_classes, stride=4, min_overlap=0.1, min_radius=2):
    H, W = grid_shape(grid_config)
    if H % stride or W % stride:
        raise ConfigError(f"grid {H}x{W} is not divisible by head stride {stride}")
    h, w = H // stride, W // stride
    cx, cy = stride * grid_config.pillar_size[0], stride * grid_config.pillar_size[1]
    heat = np.zeros((num_classes, h, w))
    reg = np.zeros((REG_CHANNELS, h, w))
    mask = np.zeros((h, w), bool)
    owner = {}
    skipped = 0
    for b in boxes:
        fx = (b.center[0] - grid_config.x_range[0]) / cx
        fy = (b.center[1] - grid_config.y_range[0]) / cy
        col, row = math.floor(fx), math.floor(fy)
        if not (0 <= col < w and 0 <= row < h) or not 0 <= b.class_id < num_classes:
            skipped += 1
            continue
        r = max(min_radius, int(gaussian_radius(b.size[0] / cx, b.size[1] / cy, min_overlap)))
        splat(heat[b.class_id], row, col, r)
        reg[:, row, col] = (fx - col, fy - row, b.center[2], math.log(b.size[0]), math.log(b.size[1]),
                            math.log(b.size[2]), math.sin(b.yaw), math.cos(b.yaw))
        mask[row, col] = True
        owner[(row, col)] = b
    positives = [(r, c, owner[(r, c)]) for r, c in sorted(owner)]
    dtype = T.get_default_dtype()
    return Targets(heat.astype(dtype), reg.astype(dtype), mask, positives, skipped)


def decode_cell(reg_vec, row, col, grid_config, stride=4):
    """BEV (x, y, l, w, yaw) of the box regressed at one cell."""
    v = np.asarray(reg_vec, dtype=np.float64)
    cx, cy = stride * grid_config.pillar_size[0], stride * grid_config.pillar_size[1]
    x = grid_config.x_range[0] + (col + v[0]) * cx
    y = grid_config.y_range[0] + (row + v[1]) * cy
    l, w = np.exp(np.clip(v[3:5], -10.0, 10.0))
    return (x, y, float(l), float(w), safe_atan2(v[6], v[7]))


def iou_target(pred_bev, gt_box):
    return bev_iou(pred_bev, gt_box.bev)


# ---------------------------------------------------------------- losses


def gaussian_focal_loss(pred, target):
    """Penalty-reduced focal loss on probabilities, normalised by the number of peaks."""
    t = np.asarray(target)
    pos = (t == 1.0).astype(pred.data.dtype)
    neg = ((1.0 - t) ** 4 * (1.0 - pos)).astype(pred.data.dtype)
    p = T.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = 1.0 - p
    pos_term = T.pow(one_minus, 2) * T.log(p) * pos
    neg_term = T.pow(p, 2) * T.log(one_minus) * neg
    n = max(float(pos.sum()), 1.0)
    return -(T.tsum(pos_term) + T.tsum(neg_term)) * (1.0 / n)


def combine(components, weights):
    return weights.cls * components["cls"] + weights.iou * components["iou"] + weights.reg * components["reg"]


def _gather_cells(x, flat_idx):
    """Rows of an (N, C, h, w) tensor at flattened (n, row, col) positions -> (P, C)."""
    N, C, h, w = x.shape
    cells = T.reshape(T.transpose(x, (0, 2, 3, 1)), (N * h * w, C))
    return T.take(cells, flat_idx)


def iou_targets(out, targets, grid_config, stride=4):
    """IoU of the box regressed at every positive cell with its ground truth, in positive order."""
    return np.array([iou_target(decode_cell(out.reg.data[n, :, r, c], r, c, grid_config, stride), box)
                     for n, t in enumerate(targets) for r, c, box in t.positives], dtype=np.float64)


def total_loss(out, targets, weights=None, grid_config=None, stride=4, iou_encoding="raw", ious=None):
    """Weighted sum of the heatmap, IoU and regression terms for a batch.

    ``targets`` holds one :class:`Targets` per scene. The IoU targets are
    constants derived from the current regression output; pass ``ious`` to
    supply them precomputed (e.g. to hold them fixed under finite differences).
    Returns the scalar loss tensor and a dict of the unweighted component tensors.
    """
    weights = weights or LossWeights()
    heat_t = np.stack([t.heatmap for t in targets])
    l_cls = gaussian_focal_loss(out.heatmap, heat_t)
    N, _, h, w = out.reg.shape
    flat, reg_rows = [], []
    for n, t in enumerate(targets):
        for r, c, _ in t.positives:
            flat.append(n * h * w + r * w + c)
            reg_rows.append(t.reg[:, r, c])
    npos = len(flat)
    zero = T.Tensor(np.zeros((), dtype=out.reg.data.dtype))
    if npos == 0:
        comps = {"cls": l_cls, "iou": zero, "reg": zero}
        return combine(comps, weights), comps
    idx = np.asarray(flat)
    reg_pred = _gather_cells(out.reg, idx)
    reg_t = np.asarray(reg_rows, dtype=out.reg.data.dtype)
    l_reg = T.tsum(T.absolute(reg_pred - reg_t)) * (1.0 / npos)
    if ious is None and grid_config is not None:
        ious = iou_targets(out, targets, grid_config, stride)
    if ious is None:
        l_iou = zero
    else:
        iou_t = np.asarray(ious, dtype=out.iou.data.dtype).reshape(npos, 1)
        if iou_encoding == "affine":
            iou_t = 2.0 * iou_t - 0.5
        elif iou_encoding != "raw":
            raise ConfigError(f"unknown iou_encoding {iou_encoding!r}")
        l_iou = T.tsum(T.absolute(_gather_cells(out.iou, idx) - iou_t)) * (1.0 / npos)
    comps = {"cls": l_cls, "iou": l_iou, "reg": l_reg}
    return combine(comps, weights), comps
