"""Pillarization, point decoration and the max+avg pillar feature encoder."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module


class ConfigError(ValueError):
    pass


@dataclass
class PillarGridConfig:
    x_range: tuple = (-54.0, 54.0)
    y_range: tuple = (-54.0, 54.0)
    z_range: tuple = (-5.0, 3.0)
    pillar_size: tuple = (0.15, 0.15)
    max_points_per_pillar: int = 20
    max_pillars: int = 30000
    out_channels: int = 64

    def __post_init__(self):
        self.x_range = tuple(float(v) for v in self.x_range)
        self.y_range = tuple(float(v) for v in self.y_range)
        self.z_range = tuple(float(v) for v in self.z_range)
        self.pillar_size = tuple(float(v) for v in self.pillar_size)
        if self.max_points_per_pillar < 1:
            raise ConfigError("max_points_per_pillar must be >= 1")
        if self.max_pillars < 1:
            raise ConfigError("max_pillars must be >= 1")
        grid_shape(self)

    def to_dict(self):
        return asdict(self)

    @property
    def z_center(self):
        return 0.5 * (self.z_range[0] + self.z_range[1])


def _cells(span, step, axis):
    n = span / step
    r = round(n)
    if r < 1 or abs(n - r) > 1e-6 * max(1.0, n):
        raise ConfigError(f"{axis} span {span} m is not a whole number of {step} m pillars")
    return int(r)


def grid_shape(config):
    """(H, W): rows along y, columns along x."""
    h = _cells(config.y_range[1] - config.y_range[0], config.pillar_size[1], "y")
    w = _cells(config.x_range[1] - config.x_range[0], config.pillar_size[0], "x")
    return h, w


def cell_index(values, lo, step):
    """Floor bucketing; values on a boundary go to the higher cell.

    The quotient is rounded to 9 decimals first so that boundaries like
    0.15 / 0.15 do not fall one cell short through representation error.
    """
    q = (np.asarray(values, dtype=np.float64) - lo) / step
    return np.floor(np.round(q, 9)).astype(np.int64)


@dataclass
class PillarTensor:
    """Raw points grouped per pillar.

    ``points`` is (P, Nmax, 5), ``mask`` (P, Nmax) bool, ``coords`` (P, 2) of
    (row, col). Points within a pillar are in a canonical order so nothing
    downstream depends on the input point order.
    """

    points: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    counts: np.ndarray

    @property
    def num_pillars(self):
        return len(self.coords)


def pillarize(cloud, config, rng=None):
    pts = np.asarray(cloud.points if hasattr(cloud, "points") else cloud, dtype=np.float32)
    H, W = grid_shape(config)
    nmax = config.max_points_per_pillar
    col = cell_index(pts[:, 0], config.x_range[0], config.pillar_size[0])
    row = cell_index(pts[:, 1], config.y_range[0], config.pillar_size[1])
    z = pts[:, 2]
    ok = ((col >= 0) & (col < W) & (row >= 0) & (row < H)
          & (z >= config.z_range[0]) & (z < config.z_range[1]))
    pts, row, col = pts[ok], row[ok], col[ok]
    cell = row * W + col
    # canonical order: by cell, then by point values
    order = np.lexsort((pts[:, 4], pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], cell))
    pts, cell = pts[order], cell[order]
    uniq, start, counts = np.unique(cell, return_index=True, return_counts=True)
    if len(uniq) > config.max_pillars:
        keep = np.lexsort((uniq, -counts))[:config.max_pillars]
        keep.sort()
        uniq, start, counts = uniq[keep], start[keep], counts[keep]
    P = len(uniq)
    out = np.zeros((P, nmax, 5), dtype=np.float32)
    mask = np.zeros((P, nmax), dtype=bool)
    slots = np.minimum(counts, nmax)
    small = counts <= nmax
    if small.any():
        pid = np.repeat(np.nonzero(small)[0], counts[small])
        offs = np.arange(len(pid)) - np.repeat(np.cumsum(counts[small]) - counts[small], counts[small])
        src = np.repeat(start[small], counts[small]) + offs
        out[pid, offs] = pts[src]
        mask[pid, offs] = True
    big = np.nonzero(~small)[0]
    if len(big):
        if rng is None:
            rng = np.random.default_rng(0)
        for p in big:
            pick = np.sort(rng.choice(counts[p], size=nmax, replace=False))
            out[p] = pts[start[p] + pick]
            mask[p] = True
    coords = np.stack([uniq // W, uniq % W], axis=1).astype(np.int64)
    return PillarTensor(out, mask, coords, slots.astype(np.int64))


def decorate(pt, config, z_center="pillar"):
    """Per-point features [x, y, z, i, t, xc, yc, zc, xp, yp, zp].

    (xc, yc, zc): offset to the mean of the pillar's valid points.
    (xp, yp): offset to the pillar cell centre. zp: offset to the pillar's
    vertical centre, the midpoint of ``z_range``; with ``z_center="points"``
    the points' own mean z is used instead. ``z_center=None`` drops zp.
    Masked slots are zero.
    """
    p = pt.points.astype(np.float64)
    m = pt.mask[:, :, None]
    cnt = np.maximum(pt.mask.sum(axis=1), 1)[:, None]
    acc = np.zeros((len(p), 3))
    for s in range(p.shape[1]):
        acc += np.where(pt.mask[:, s, None], p[:, s, :3], 0.0)
    mean = acc / cnt
    rel = p[:, :, :3] - mean[:, None, :]
    dx, dy = config.pillar_size
    cx = config.x_range[0] + (pt.coords[:, 1] + 0.5) * dx
    cy = config.y_range[0] + (pt.coords[:, 0] + 0.5) * dy
    xp = p[:, :, 0] - cx[:, None]
    yp = p[:, :, 1] - cy[:, None]
    feats = [p, rel, xp[..., None], yp[..., None]]
    if z_center == "pillar":
        feats.append(p[:, :, 2:3] - config.z_center)
    elif z_center == "points":
        feats.append(p[:, :, 2:3] - mean[:, None, 2:3])
    elif z_center is not None:
        raise ConfigError(f"unknown z_center mode {z_center!r}")
    out = np.concatenate(feats, axis=2) * m
    return out.astype(T.get_default_dtype())


@dataclass
class Batch:
    """Pillars of several scenes concatenated, with their scene index."""

    features: np.ndarray  # (P, Nmax, D)
    mask: np.ndarray
    batch_idx: np.ndarray
    coords: np.ndarray
    batch_size: int


def collate(decorated, pillar_tensors):
    b = np.concatenate([np.full(pt.num_pillars, i, np.int64) for i, pt in enumerate(pillar_tensors)])
    return Batch(np.concatenate(decorated, axis=0), np.concatenate([pt.mask for pt in pillar_tensors]),
                 b, np.concatenate([pt.coords for pt in pillar_tensors]).reshape(-1, 2),
                 len(pillar_tensors))


class PillarEncoder(Module):
    """Shared per-point linear + norm + ReLU, then max||avg pooling and scatter.

    With ``avg_pool=False`` the MLP emits ``out_channels`` directly and only
    max pooling is used; together with ``z_offset=False`` this is the
    PointPillars-style encoder.
    """

    def __init__(self, out_channels, avg_pool=True, z_offset=True):
        super().__init__()
        self.avg_pool = avg_pool
        self.z_offset = z_offset
        self.in_features = 11 if z_offset else 10
        if avg_pool and out_channels % 2:
            raise ConfigError("out_channels must be even when avg pooling is on")
        width = out_channels // 2 if avg_pool else out_channels
        self.out_channels = out_channels
        self.linear = Linear(self.in_features, width, bias=False)
        self.norm = LayerNorm(width)

    def forward(self, batch, grid_hw):
        H, W = grid_hw
        if batch.features.shape[-1] != self.in_features:
            raise ConfigError(f"encoder expects {self.in_features} point features, "
                              f"got {batch.features.shape[-1]}")
        # the point MLP only runs on occupied slots
        valid = T.Tensor(batch.features[batch.mask])
        x = T.unmask(T.relu(self.norm(self.linear(valid))), batch.mask)
        if self.avg_pool:
            pooled = T.pool_points(x, batch.mask)
        else:
            pooled = T.pool_points(x, batch.mask)[:, :self.out_channels]
        return T.scatter_pillars(pooled, batch.batch_idx, batch.coords[:, 0], batch.coords[:, 1],
                                 batch.batch_size, H, W)


def encode_clouds(encoder, clouds, config, rngs=None, z_center="pillar"):
    """Pillarize, decorate and encode a list of clouds into (N, C, H, W)."""
    pts = [pillarize(c, config, None if rngs is None else rngs[i]) for i, c in enumerate(clouds)]
    zc = z_center if encoder.z_offset else None
    dec = [decorate(pt, config, zc) for pt in pts]
    return encoder(collate(dec, pts), grid_shape(config))
