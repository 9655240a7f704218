"""Point clouds, boxes, synthetic scenes and ground-truth copy-paste."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import bev_iou, from_box_frame, normalize_yaw, points_in_box, to_box_frame

POINT_FIELDS = ("x", "y", "z", "intensity", "t")


class GenerationError(RuntimeError):
    pass


@dataclass
class Box3D:
    center: tuple
    size: tuple
    yaw: float
    class_id: int
    score: float | None = None
    iou_score: float | None = None

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size need three components")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = normalize_yaw(float(self.yaw))
        self.class_id = int(self.class_id)

    @property
    def bev(self):
        return (self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)

    def to_dict(self):
        d = {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
             "class_id": self.class_id}
        if self.score is not None:
            d["score"] = self.score
        if self.iou_score is not None:
            d["iou_score"] = self.iou_score
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["size"], d["yaw"], d["class_id"], d.get("score"), d.get("iou_score"))


@dataclass
class PointCloud:
    """(N, 5) float32 array of x, y, z, intensity, t. Point order carries no meaning."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 5)
        if pts.ndim != 2 or pts.shape[1] not in (4, 5):
            raise ValueError(f"points must be (N, 4) or (N, 5), got {pts.shape}")
        if pts.shape[1] == 4:
            pts = np.concatenate([pts, np.zeros((len(pts), 1), np.float32)], axis=1)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        self.points = np.ascontiguousarray(pts)

    def __len__(self):
        return len(self.points)


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list
    scene_id: str = "scene"
    seed: int = 0

    def labels_dict(self):
        return {"scene_id": self.scene_id, "seed": self.seed, "boxes": [b.to_dict() for b in self.boxes]}


# ---------------------------------------------------------------- binary / json io


def read_points(path, fields_per_point=5):
    if fields_per_point not in (4, 5):
        raise ValueError("fields_per_point must be 4 or 5")
    raw = Path(path).read_bytes()
    rec = 4 * fields_per_point
    if len(raw) % rec:
        off = len(raw) - len(raw) % rec
        raise OSError(f"{path}: truncated point record at byte offset {off} "
                      f"(file is {len(raw)} bytes, records are {rec} bytes)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, fields_per_point).astype(np.float32)
    return PointCloud(pts)


def write_points(path, cloud, fields_per_point=5):
    pts = cloud.points[:, :fields_per_point].astype("<f4")
    Path(path).write_bytes(pts.tobytes())


def write_scene(directory, scene):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_points(d / f"{scene.scene_id}.bin", scene.cloud)
    (d / f"{scene.scene_id}.json").write_text(json.dumps(scene.labels_dict(), indent=1, sort_keys=True))


def read_labels(path):
    doc = json.loads(Path(path).read_text())
    return doc["scene_id"], int(doc.get("seed", 0)), [Box3D.from_dict(b) for b in doc["boxes"]]


def read_scene(directory, scene_id):
    d = Path(directory)
    sid, seed, boxes = read_labels(d / f"{scene_id}.json")
    return Scene(read_points(d / f"{scene_id}.bin", 5), boxes, sid, seed)


def load_scene_dir(directory):
    d = Path(directory)
    ids = sorted(p.stem for p in d.glob("*.json") if (d / f"{p.stem}.bin").exists())
    return [read_scene(d, i) for i in ids]


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class ClassPrior:
    name: str
    size: tuple
    count: int
    intensity: tuple = (0.3, 0.7)
    size_jitter: float = 0.1


DEFAULT_CLASSES = (
    ClassPrior("car", (4.2, 1.8, 1.5), 2, (0.4, 0.9)),
    ClassPrior("pedestrian", (0.7, 0.7, 1.7), 3, (0.2, 0.5)),
    ClassPrior("barrier", (0.5, 2.0, 1.0), 2, (0.7, 1.0)),
)


@dataclass
class SceneConfig:
    x_range: tuple = (-7.2, 7.2)
    y_range: tuple = (-7.2, 7.2)
    classes: tuple = DEFAULT_CLASSES
    ground_z: float = -1.6
    ground_points: int = 2000
    surface_density: float = 20.0
    noise: float = 0.02
    max_tries: int = 200

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["classes"] = [vars(c).copy() for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassPrior(**{k: tuple(v) if isinstance(v, list) else v
                                               for k, v in c.items()}) for c in d["classes"])
        for k in ("x_range", "y_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _surface_points(rng, box, n, intensity, noise):
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    uvw = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    inset = 0.49
    uvw[face == 0, 0] = l * inset
    uvw[face == 1, 0] = -l * inset
    uvw[face == 2, 1] = w * inset
    uvw[face == 3, 1] = -w * inset
    uvw[face == 4, 2] = h * inset
    uvw += rng.normal(0, noise, size=uvw.shape)
    uvw = np.clip(uvw, -0.499 * np.array([l, w, h]), 0.499 * np.array([l, w, h]))
    xyz = from_box_frame(uvw, box.center, box.yaw)
    inten = rng.uniform(*intensity, size=(n, 1))
    return np.concatenate([xyz, inten, np.zeros((n, 1))], axis=1)


def generate_scene(seed, config=None, scene_id=None):
    """Ground plane plus surface-sampled, BEV-disjoint boxes; a pure function of ``seed``."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    boxes = []
    for cls_id, prior in enumerate(cfg.classes):
        for _ in range(prior.count):
            for _try in range(cfg.max_tries):
                size = tuple(s * (1 + rng.uniform(-prior.size_jitter, prior.size_jitter)) for s in prior.size)
                r = 0.5 * math.hypot(size[0], size[1])
                if cfg.x_range[1] - cfg.x_range[0] <= 2 * r or cfg.y_range[1] - cfg.y_range[0] <= 2 * r:
                    raise GenerationError(f"class {prior.name} does not fit the scene range")
                x = rng.uniform(cfg.x_range[0] + r, cfg.x_range[1] - r)
                y = rng.uniform(cfg.y_range[0] + r, cfg.y_range[1] - r)
                yaw = rng.uniform(-math.pi, math.pi)
                cand = Box3D((x, y, cfg.ground_z + size[2] / 2), size, yaw, cls_id)
                if all(bev_iou(cand.bev, b.bev) == 0.0 for b in boxes):
                    boxes.append(cand)
                    break
            else:
                raise GenerationError(f"could not place a {prior.name} after {cfg.max_tries} tries "
                                      f"(seed {seed})")
    parts = []
    gx = rng.uniform(cfg.x_range[0], cfg.x_range[1], cfg.ground_points)
    gy = rng.uniform(cfg.y_range[0], cfg.y_range[1], cfg.ground_points)
    gz = cfg.ground_z + rng.normal(0, cfg.noise, cfg.ground_points)
    ground = np.stack([gx, gy, gz, rng.uniform(0, 0.2, cfg.ground_points), np.zeros(cfg.ground_points)], 1)
    keep = np.ones(len(ground), bool)
    for b in boxes:
        keep &= ~points_in_box(ground, b.center, (b.size[0], b.size[1], 1e3), b.yaw)
    parts.append(ground[keep])
    for b in boxes:
        prior = cfg.classes[b.class_id]
        l, w, h = b.size
        area = 2 * (l * h + w * h) + l * w
        n = max(1, int(round(cfg.surface_density * area)))
        parts.append(_surface_points(rng, b, n, prior.intensity, cfg.noise))
    pts = np.concatenate(parts, axis=0)
    return Scene(PointCloud(pts), boxes, scene_id or f"scene_{seed:06d}", int(seed))


# ---------------------------------------------------------------- GT database & copy-paste


@dataclass
class GtSampleDatabase:
    """Per-class lists of (box, points in box-local coordinates)."""

    samples: dict = field(default_factory=dict)

    @classmethod
    def from_scenes(cls, scenes):
        db = cls()
        for sc in scenes:
            pts = sc.cloud.points
            for b in sc.boxes:
                m = points_in_box(pts, b.center, b.size, b.yaw)
                if not m.any():
                    continue
                local = pts[m].copy()
                local[:, :3] = to_box_frame(pts[m], b.center, b.yaw)
                db.samples.setdefault(b.class_id, []).append((b, local))
        return db

    def __len__(self):
        return sum(len(v) for v in self.samples.values())


def copy_paste(scene, db, k, rng, area=None, max_tries=10):
    """Paste up to ``k`` stored samples per class at random BEV-free poses.

    ``k`` is an int (every class in the database) or a {class_id: count} map.
    A candidate is rejected when its BEV IoU with any present box is > 0;
    original points inside accepted boxes are removed.
    """
    per_class = {c: k for c in sorted(db.samples)} if isinstance(k, int) else dict(k)
    if not any(per_class.values()):
        return scene
    if area is None:
        pts = scene.cloud.points
        area = (-7.2, 7.2, -7.2, 7.2) if len(pts) == 0 else (
            float(pts[:, 0].min()), float(pts[:, 0].max()), float(pts[:, 1].min()), float(pts[:, 1].max()))
    x0, x1, y0, y1 = area
    boxes = list(scene.boxes)
    pasted = []
    for cls_id in sorted(per_class):
        pool = db.samples.get(cls_id, [])
        if not pool:
            continue
        for _ in range(per_class[cls_id]):
            src_box, local = pool[int(rng.integers(len(pool)))]
            r = 0.5 * math.hypot(src_box.size[0], src_box.size[1])
            for _try in range(max_tries):
                x = rng.uniform(x0 + r, x1 - r)
                y = rng.uniform(y0 + r, y1 - r)
                yaw = rng.uniform(-math.pi, math.pi)
                cand = replace(src_box, center=(x, y, src_box.center[2]), yaw=yaw)
                if all(bev_iou(cand.bev, b.bev) == 0.0 for b in boxes):
                    boxes.append(cand)
                    pasted.append((cand, local))
                    break
    if not pasted:
        return scene
    pts = scene.cloud.points
    keep = np.ones(len(pts), bool)
    for b, _ in pasted:
        keep &= ~points_in_box(pts, b.center, b.size, b.yaw)
    new = [pts[keep]]
    for b, local in pasted:
        p = local.astype(np.float64)
        p[:, :3] = from_box_frame(local[:, :3], b.center, b.yaw)
        new.append(p)
    cloud = PointCloud(np.concatenate(new, axis=0))
    return Scene(cloud, boxes, scene.scene_id, scene.seed)


def generate_dataset(out_dir, seed, n, config=None):
    """Write ``n`` scenes derived from ``seed`` into ``out_dir``."""
    scenes = [generate_scene(seed * 100003 + i, config, scene_id=f"scene_{seed}_{i:05d}") for i in range(n)]
    os.makedirs(out_dir, exist_ok=True)
    for sc in scenes:
        write_scene(out_dir, sc)
    return scenes
