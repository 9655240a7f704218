import math

import numpy as np
import pytest

from pillarnest import tensor as T
from pillarnest.data import Box3D
from pillarnest.gradcheck import check_gradients
from pillarnest.head import HeadOutput
from pillarnest.losses import (LossWeights, combine, encode_targets, gaussian_focal_loss, gaussian_kernel,
                               gaussian_radius, iou_target, iou_targets, total_loss)
from pillarnest.model import toy_grid
from pillarnest.pillars import ConfigError

from conftest import full_graph_gradcheck

GRID = toy_grid()  # 96x96 pillars, 24x24 head cells of 0.6 m


def cell_center(row, col):
    return -7.2 + (col + 0.5) * 0.6, -7.2 + (row + 0.5) * 0.6


def car(row, col, cls=0, size=(1.2, 0.9, 1.0), yaw=0.3):
    x, y = cell_center(row, col)
    return Box3D((x, y, 0.0), size, yaw, cls)


# ---------------------------------------------------------------- targets


def test_one_box_one_peak():
    t = encode_targets([car(10, 12)], GRID, 3)
    assert t.heatmap.shape == (3, 24, 24)
    assert (t.heatmap == 1.0).sum() == 1 and t.heatmap[0, 10, 12] == 1.0
    assert t.mask.sum() == 1 and not t.heatmap[1:].any()
    assert t.heatmap.max() == 1.0 and t.heatmap.min() == 0.0


def test_two_distant_boxes():
    t = encode_targets([car(3, 3), car(20, 20)], GRID, 1)
    assert (t.heatmap == 1.0).sum() == 2
    far = t.heatmap[0, 8:15, 8:15]
    assert not far.any()


def test_overlapping_gaussians_combine_by_max():
    a, b = car(10, 10), car(10, 12)
    both = encode_targets([a, b], GRID, 1).heatmap
    np.testing.assert_array_equal(both, np.maximum(encode_targets([a], GRID, 1).heatmap,
                                                   encode_targets([b], GRID, 1).heatmap))


def test_regression_targets_at_peak():
    b = Box3D((0.1, -0.2, 0.4), (2.0, 1.0, 1.5), 0.7, 0)
    t = encode_targets([b], GRID, 1)
    (row, col, owner), = t.positives
    assert owner == b
    fx, fy = (0.1 + 7.2) / 0.6, (-0.2 + 7.2) / 0.6
    expect = [fx - col, fy - row, 0.4, math.log(2), 0, math.log(1.5), math.sin(0.7), math.cos(0.7)]
    np.testing.assert_allclose(t.reg[:, row, col], expect, rtol=1e-6, atol=1e-6)


def test_out_of_range_and_bad_class_skipped():
    t = encode_targets([Box3D((20.0, 0, 0), (1, 1, 1), 0, 0), car(5, 5, cls=4)], GRID, 3)
    assert t.skipped == 2 and not t.heatmap.any()


def test_gaussian_kernel_and_radius():
    g = gaussian_kernel(2)
    assert g.shape == (5, 5) and g[2, 2] == 1.0
    np.testing.assert_allclose(g, g.T)
    assert gaussian_radius(4, 4) > gaussian_radius(2, 2) > 0


def test_indivisible_grid_rejected():
    with pytest.raises(ConfigError, match="divisible"):
        encode_targets([], GRID, 1, stride=5)


# ---------------------------------------------------------------- IoU target


def test_iou_target_cases():
    gt = Box3D((0, 0, 0), (1, 1, 1), 0, 0)
    assert iou_target((0, 0, 1, 1, 0), gt) == pytest.approx(1.0, abs=1e-12)
    assert iou_target((5, 5, 1, 1, 0), gt) == 0.0
    assert iou_target((0.5, 0, 1, 1, 0), gt) == pytest.approx(1 / 3, abs=1e-12)


# ---------------------------------------------------------------- focal loss


def test_focal_single_peak_half_probability():
    pred = T.Tensor(np.array([[[[0.5]]]]))
    assert gaussian_focal_loss(pred, np.ones((1, 1, 1, 1))).item() == pytest.approx(0.25 * math.log(2), abs=1e-5)
    assert abs(gaussian_focal_loss(pred, np.ones((1, 1, 1, 1))).item() - 0.17329) < 1e-5


def test_focal_zero_for_perfect_prediction():
    t = np.zeros((1, 1, 4, 4))
    t[0, 0, 1, 2] = 1.0
    with T.default_dtype(np.float64):
        assert gaussian_focal_loss(T.Tensor(t), t).item() < 1e-6


def test_focal_gradients(f64):
    r = np.random.default_rng(0)
    t = r.random((1, 2, 4, 4)) * 0.9
    t[0, 0, 1, 1] = t[0, 1, 2, 3] = 1.0
    p = T.Tensor(r.uniform(0.05, 0.95, t.shape), requires_grad=True)
    res = check_gradients(lambda: gaussian_focal_loss(p, t), [p], h=1e-6, rtol=1e-4)
    assert res.ok and res.checked == 32


# ---------------------------------------------------------------- composite loss


def test_combine_hand_value():
    comps = {"cls": 2.0, "iou": 1.0, "reg": 4.0}
    assert combine(comps, LossWeights()) == 4.0
    assert combine(comps, LossWeights(0, 0, 0)) == 0.0


def test_combine_linear_in_weights():
    r = np.random.default_rng(0)
    for _ in range(100):
        comps = dict(zip(("cls", "iou", "reg"), r.random(3) * 10))
        a, b = LossWeights(*r.random(3)), LossWeights(*r.random(3))
        k = r.random() * 3
        ab = LossWeights(a.cls + k * b.cls, a.iou + k * b.iou, a.reg + k * b.reg)
        assert combine(comps, ab) == pytest.approx(combine(comps, a) + k * combine(comps, b), rel=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        LossWeights(reg=-1)


def random_output(r, n=1, k=2, h=24, w=24):
    hm = T.Tensor(r.uniform(0.01, 0.99, (n, k, h, w)), requires_grad=True)
    reg = T.Tensor(r.normal(size=(n, 8, h, w)), requires_grad=True)
    iou = T.Tensor(r.uniform(0, 1, (n, 1, h, w)), requires_grad=True)
    return HeadOutput(hm, reg, iou, hm)


def test_zero_positives(f64):
    out = random_output(np.random.default_rng(0))
    t = encode_targets([], GRID, 2)
    loss, comps = total_loss(out, [t], LossWeights(), GRID)
    assert comps["reg"].item() == 0.0 and comps["iou"].item() == 0.0
    assert loss.item() == pytest.approx(comps["cls"].item())
    T.backward(loss)
    assert out.reg.grad is None or not out.reg.grad.any()


def test_all_zero_weights_give_zero(f64):
    out = random_output(np.random.default_rng(1))
    t = encode_targets([car(4, 4), car(15, 9, cls=1)], GRID, 2)
    loss, _ = total_loss(out, [t], LossWeights(0, 0, 0), GRID)
    assert loss.item() == 0.0


def test_doubling_weights_doubles_loss_and_grads(f64):
    t = [encode_targets([car(4, 4), car(15, 9, cls=1)], GRID, 2)]
    results = []
    for scale in (1.0, 2.0):
        out = random_output(np.random.default_rng(3))
        w = LossWeights(1.0 * scale, 1.0 * scale, 0.25 * scale)
        loss, _ = total_loss(out, t, w, GRID)
        T.backward(loss)
        results.append((loss.item(), out.heatmap.grad.copy(), out.reg.grad.copy(), out.iou.grad.copy()))
    (l1, *g1), (l2, *g2) = results
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12)


def test_iou_targets_follow_regression_and_can_be_frozen(f64):
    out = random_output(np.random.default_rng(4))
    t = [encode_targets([car(6, 6)], GRID, 2)]
    ious = iou_targets(out, t, GRID)
    assert ious.shape == (1,) and 0.0 <= ious[0] <= 1.0
    a = total_loss(out, t, grid_config=GRID)[1]["iou"].item()
    b = total_loss(out, t, grid_config=GRID, ious=ious)[1]["iou"].item()
    assert a == b
    c = total_loss(out, t, grid_config=GRID, ious=np.ones(1))[1]["iou"].item()
    assert c == pytest.approx(abs(out.iou.data[0, 0, 6, 6] - 1.0))


def test_affine_iou_encoding(f64):
    out = random_output(np.random.default_rng(5))
    t = [encode_targets([car(6, 6)], GRID, 2)]
    l = total_loss(out, t, grid_config=GRID, ious=np.array([0.5]), iou_encoding="affine")[1]["iou"].item()
    assert l == pytest.approx(abs(out.iou.data[0, 0, 6, 6] - 0.5))
    with pytest.raises(ConfigError):
        total_loss(out, t, grid_config=GRID, iou_encoding="bogus")


def test_loss_gradients_wrt_head_maps(f64):
    r = np.random.default_rng(6)
    out = random_output(r, h=8, w=8)
    grid = toy_grid()
    grid.x_range = grid.y_range = (-2.4, 2.4)
    t = [encode_targets([Box3D((0.1, 0.3, 0), (1.0, 0.8, 1), 0.2, 1)], grid, 2)]
    ious = iou_targets(out, t, grid)
    res = check_gradients(lambda: total_loss(out, t, grid_config=grid, ious=ious)[0],
                          [out.heatmap, out.reg, out.iou], h=1e-6, rtol=1e-4)
    assert res.ok, res.failures[:3]


def test_full_graph_gradients_sampled():
    res = full_graph_gradcheck(n_samples=300)
    assert res.ok, res.failures[:3]
    assert res.max_rel_error < 5e-3
