"""Bird's-eye-view rotated box geometry: corners, convex clipping, IoU."""
from __future__ import annotations

import math

import numpy as np


def normalize_yaw(yaw):
    """Map an angle into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2 * math.pi)
    if y <= 0:
        y += 2 * math.pi
    return y - math.pi


def bev_corners(x, y, length, width, yaw):
    """Counter-clockwise corners of an oriented rectangle; length runs along yaw."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return [(x + c * u - s * v, y + s * u + c * v) for u, v in local]


def polygon_area(poly):
    """Shoelace area (positive for counter-clockwise vertex order)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` by a CCW convex ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_iou(a, b):
    """IoU of two BEV rectangles given as (x, y, length, width, yaw)."""
    pa = bev_corners(*a)
    pb = bev_corners(*b)
    inter = polygon_area(clip_convex(pa, pb))
    if inter <= 0.0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def bev_params(boxes):
    """(n, 5) array of x, y, length, width, yaw from Box3D-like objects."""
    return np.array([[b.center[0], b.center[1], b.size[0], b.size[1], b.yaw] for b in boxes],
                    dtype=np.float64).reshape(-1, 5)


def may_overlap(params, i, others):
    """Boolean mask of ``others`` whose bounding circles intersect box ``i``."""
    r = 0.5 * np.hypot(params[:, 2], params[:, 3])
    d = np.hypot(params[others, 0] - params[i, 0], params[others, 1] - params[i, 1])
    return d < r[others] + r[i]


def iou_matrix(pa, pb):
    """Pairwise BEV IoU between two (n, 5) parameter arrays."""
    out = np.zeros((len(pa), len(pb)))
    if not len(pa) or not len(pb):
        return out
    ra = 0.5 * np.hypot(pa[:, 2], pa[:, 3])
    rb = 0.5 * np.hypot(pb[:, 2], pb[:, 3])
    d = np.hypot(pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1])
    for i, j in zip(*np.nonzero(d < ra[:, None] + rb[None, :])):
        out[i, j] = bev_iou(tuple(pa[i]), tuple(pb[j]))
    return out


def points_in_box(points_xyz, center, size, yaw, margin=0.0):
    """Mask of points inside an oriented 3-D box (yaw about +z)."""
    d = np.asarray(points_xyz, dtype=np.float64)[:, :3] - np.asarray(center, dtype=np.float64)
    c, s = math.cos(yaw), math.sin(yaw)
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    l, w, h = size
    return ((np.abs(u) <= l / 2 + margin) & (np.abs(v) <= w / 2 + margin)
            & (np.abs(d[:, 2]) <= h / 2 + margin))


def to_box_frame(points_xyz, center, yaw):
    d = np.asarray(points_xyz, dtype=np.float64)[:, :3] - np.asarray(center, dtype=np.float64)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def from_box_frame(local_xyz, center, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    l = np.asarray(local_xyz, dtype=np.float64)
    x = c * l[:, 0] - s * l[:, 1] + center[0]
    y = s * l[:, 0] + c * l[:, 1] + center[1]
    return np.stack([x, y, l[:, 2] + center[2]], axis=1)
