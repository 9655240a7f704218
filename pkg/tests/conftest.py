import numpy as np
import pytest

from pillarnest import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Six-loop cross-correlation reference."""
    N, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    per = Co // groups
    for n in range(N):
        for o in range(Co):
            g = o // per
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, g * Cg + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def full_graph_gradcheck(n_samples=400, seed=0, rtol=5e-3, h=1e-6):
    """Finite-difference check of encoder -> backbone -> neck -> head -> loss on a 16x16 grid (float64)."""
    from pillarnest.backbone import make_spec
    from pillarnest.data import Box3D, PointCloud
    from pillarnest.gradcheck import check_gradients
    from pillarnest.head import NeckSpec
    from pillarnest.losses import encode_targets, iou_targets, total_loss
    from pillarnest.model import ModelConfig, PillarNeSt
    from pillarnest.pillars import PillarGridConfig

    r = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        grid = PillarGridConfig(x_range=(-1.2, 1.2), y_range=(-1.2, 1.2), z_range=(-2.0, 2.0),
                                max_points_per_pillar=8, max_pillars=256)
        cfg = ModelConfig(grid=grid, backbone=make_spec((1, 1, 1, 1, 1), (4, 8, 8, 8, 8)),
                          neck=NeckSpec(4, 6, 4), head_channels=6, num_classes=2)
        model = PillarNeSt(cfg).initialize(r)
        for _, p in model.named_parameters():
            p.data = p.data + r.normal(0, 0.1, size=p.shape)
        clouds, targets = [], []
        for _ in range(2):
            pts = np.column_stack([r.uniform(-1.2, 1.2, (300, 2)), r.uniform(-1, 1, 300),
                                   r.random(300), np.zeros(300)])
            clouds.append(PointCloud(pts))
            boxes = [Box3D((r.uniform(-0.9, 0.9), r.uniform(-0.9, 0.9), 0.0), (0.8, 0.5, 1.0),
                           r.uniform(-3, 3), int(r.integers(2)))]
            targets.append(encode_targets(boxes, grid, 2, 4, min_radius=1))
        batch = model.make_batch(clouds)
        ious = iou_targets(model(batch), targets, grid)

        def loss():
            return total_loss(model(batch), targets, grid_config=grid, ious=ious)[0]

        params = [p for _, p in model.named_parameters()]
        return check_gradients(loss, params, h=h, rtol=rtol, atol=1e-6, n_samples=n_samples,
                               rng=np.random.default_rng(seed + 1))
