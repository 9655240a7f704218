import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from pillarnest.data import (Box3D, GenerationError, GtSampleDatabase, PointCloud, Scene, SceneConfig,
                             ClassPrior, copy_paste, generate_dataset, generate_scene, load_scene_dir,
                             read_points, read_scene, write_points, write_scene)
from pillarnest.geometry import bev_corners, points_in_box


def shapely_iou(a, b):
    pa, pb = Polygon(bev_corners(*a.bev)), Polygon(bev_corners(*b.bev))
    return pa.intersection(pb).area / pa.union(pb).area


def test_read_single_point(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(struct.pack("<5f", 1, 2, 3, 0.5, 0.0))
    cloud = read_points(p, 5)
    np.testing.assert_array_equal(cloud.points, [[1, 2, 3, 0.5, 0.0]])


def test_read_empty_file(tmp_path):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    assert len(read_points(p)) == 0


def test_four_field_files_get_zero_time(tmp_path):
    p = tmp_path / "four.bin"
    p.write_bytes(struct.pack("<8f", 1, 2, 3, 0.1, 4, 5, 6, 0.2))
    pts = read_points(p, 4).points
    assert pts.shape == (2, 5) and np.all(pts[:, 4] == 0)


def test_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 27)
    with pytest.raises(OSError, match="byte offset 20"):
        read_points(p, 5)


def test_invalid_field_count(tmp_path):
    with pytest.raises(ValueError):
        read_points(tmp_path / "x.bin", 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 200), st.sampled_from([4, 5]), st.integers(0, 2 ** 31 - 1))
def test_write_read_round_trip(tmp_path_factory, n, fields, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 5)).astype(np.float32)
    if fields == 4:
        pts[:, 4] = 0
    path = tmp_path_factory.mktemp("rt") / "c.bin"
    write_points(path, PointCloud(pts), fields)
    assert np.array_equal(read_points(path, fields).points, pts)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        PointCloud(np.array([[0, 0, np.nan, 0, 0]]))


def test_box_validation_and_yaw_normalization():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0, 0)
    b = Box3D((0, 0, 0), (1, 1, 1), 3 * math.pi, 0)
    assert -math.pi < b.yaw <= math.pi
    assert math.isclose(b.yaw, math.pi)
    assert Box3D.from_dict(b.to_dict()) == b


def test_generation_is_deterministic():
    a, b = generate_scene(7), generate_scene(7)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert a.boxes == b.boxes
    assert not np.array_equal(generate_scene(8).cloud.points, a.cloud.points)


@pytest.mark.parametrize("seed", range(10))
def test_generated_boxes_disjoint_and_occupied(seed):
    sc = generate_scene(seed)
    assert len(sc.boxes) == sum(c.count for c in SceneConfig().classes)
    for i, a in enumerate(sc.boxes):
        assert points_in_box(sc.cloud.points, a.center, a.size, a.yaw).sum() >= 1
        for b in sc.boxes[i + 1:]:
            assert shapely_iou(a, b) == 0.0


def test_generation_fails_when_boxes_cannot_fit():
    cfg = SceneConfig(x_range=(-3, 3), y_range=(-3, 3),
                      classes=(ClassPrior("big", (4.0, 4.0, 1.0), 6, size_jitter=0.0),), max_tries=20)
    with pytest.raises(GenerationError, match="could not place"):
        generate_scene(0, cfg)
    with pytest.raises(GenerationError, match="does not fit"):
        generate_scene(0, SceneConfig(x_range=(-1, 1), y_range=(-1, 1)))


def test_scene_directory_round_trip(tmp_path):
    sc = generate_scene(3, scene_id="s3")
    write_scene(tmp_path, sc)
    back = read_scene(tmp_path, "s3")
    assert np.array_equal(back.cloud.points, sc.cloud.points.astype(np.float32))
    assert back.boxes == sc.boxes and back.seed == 3
    assert [s.scene_id for s in load_scene_dir(tmp_path)] == ["s3"]


def test_generate_dataset_identical_bytes(tmp_path):
    generate_dataset(tmp_path / "a", 0, 3)
    generate_dataset(tmp_path / "b", 0, 3)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 6
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_scene_config_dict_round_trip():
    cfg = SceneConfig(ground_points=10)
    assert SceneConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- database & copy-paste


@pytest.fixture(scope="module")
def db():
    return GtSampleDatabase.from_scenes([generate_scene(s) for s in range(4)])


def test_database_points_lie_in_their_boxes(db):
    for samples in db.samples.values():
        for box, local in samples:
            half = np.array(box.size) / 2
            assert np.all(np.abs(local[:, :3]) <= half + 1e-6)


def test_copy_paste_zero_is_identity(db):
    sc = generate_scene(11)
    assert copy_paste(sc, db, 0, np.random.default_rng(0)) is sc


def test_copy_paste_into_empty_scene(db):
    one_class = GtSampleDatabase({0: db.samples[0]})
    empty = Scene(PointCloud(np.zeros((0, 5))), [], "empty")
    out = copy_paste(empty, one_class, 3, np.random.default_rng(0))
    assert len(out.boxes) == 3
    inside = np.zeros(len(out.cloud), bool)
    for b in out.boxes:
        inside |= points_in_box(out.cloud.points, b.center, b.size, b.yaw, margin=1e-5)
    assert inside.all()


@pytest.mark.parametrize("seed", range(5))
def test_copy_paste_never_overlaps(db, seed):
    sc = generate_scene(100 + seed)
    out = copy_paste(sc, db, 2, np.random.default_rng(seed), area=(-7.2, 7.2, -7.2, 7.2))
    assert len(out.boxes) > len(sc.boxes)
    for i, a in enumerate(out.boxes):
        for b in out.boxes[i + 1:]:
            assert shapely_iou(a, b) == 0.0


def test_copy_paste_replaces_box_interiors(db):
    # one stored sample per class: a pasted box must hold exactly that sample's points
    single = GtSampleDatabase({c: v[:1] for c, v in db.samples.items()})
    sc = generate_scene(42)
    out = copy_paste(sc, single, 1, np.random.default_rng(3), area=(-7.2, 7.2, -7.2, 7.2))
    pasted = out.boxes[len(sc.boxes):]
    assert pasted
    for b in pasted:
        n_sample = len(single.samples[b.class_id][0][1])
        assert points_in_box(out.cloud.points, b.center, b.size, b.yaw).sum() == n_sample


def test_copy_paste_deterministic(db):
    sc = generate_scene(5)
    a = copy_paste(sc, db, 2, np.random.default_rng(9))
    b = copy_paste(sc, db, 2, np.random.default_rng(9))
    assert np.array_equal(a.cloud.points, b.cloud.points) and a.boxes == b.boxes
