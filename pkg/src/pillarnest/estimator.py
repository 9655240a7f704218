"""scikit-learn style wrapper: ``fit`` on (clouds, boxes), ``predict`` boxes, ``score`` mAP."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneSpec, PRESETS, preset
from .benchmark import TOY_HEAD_CHANNELS, TOY_NECK
from .checkpoint import CheckpointArchive, adapt, load
from .data import Box3D, PointCloud, Scene
from .head import DecodeConfig, NeckSpec
from .model import ModelConfig, PillarNeSt, toy_grid
from .pillars import ConfigError, PillarGridConfig
from .train import TrainConfig, evaluate_model, train


def _as_cloud(x, i):
    if isinstance(x, PointCloud):
        return x
    if isinstance(x, Scene):
        return x.cloud
    arr = np.asarray(x)
    if arr.ndim != 2 or arr.shape[1] not in (4, 5):
        raise ValueError(f"X[{i}]: expected an (N, 4) or (N, 5) point array, got shape {arr.shape}")
    return PointCloud(arr)


def _as_boxes(y, i, num_classes):
    out = []
    for j, b in enumerate(y):
        box = b if isinstance(b, Box3D) else Box3D.from_dict(b)
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"y[{i}][{j}]: class_id {box.class_id} outside [0, {num_classes})")
        out.append(box)
    return out


class PillarNeStDetector(BaseEstimator):
    """Pillar detector with a staged large-kernel backbone.

    Parameters
    ----------
    backbone : str or BackboneSpec
        Preset name (``tiny``, ``small``, ``base``, ``large``) or an explicit spec.
    grid : "toy", "full" or PillarGridConfig
        ``toy`` is the 96 x 96 grid over [-7.2, 7.2] m; ``full`` the 720 x 720 one.
    init_checkpoint : str, CheckpointArchive or None
        A staged pretrained archive adapted into the backbone before training.
    """

    def __init__(self, backbone="tiny", grid="toy", num_classes=3, epochs=40, fade_epochs=5, batch_size=4,
                 peak_lr=1e-3, weight_decay=0.01, copy_paste=1, score_threshold=0.2, alpha=0.5,
                 init_checkpoint=None, random_state=0, verbose=False):
        self.backbone = backbone
        self.grid = grid
        self.num_classes = num_classes
        self.epochs = epochs
        self.fade_epochs = fade_epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.copy_paste = copy_paste
        self.score_threshold = score_threshold
        self.alpha = alpha
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state
        self.verbose = verbose

    # ---------------------------------------------------------------- config

    def _spec(self):
        if isinstance(self.backbone, BackboneSpec):
            return self.backbone
        if self.backbone not in PRESETS:
            raise ConfigError(f"backbone: unknown preset {self.backbone!r}")
        return preset(self.backbone)

    def _model_config(self):
        if isinstance(self.grid, PillarGridConfig):
            grid, neck, head = self.grid, NeckSpec(), 64
        elif self.grid == "toy":
            grid, neck, head = toy_grid(), TOY_NECK, TOY_HEAD_CHANNELS
        elif self.grid == "full":
            grid, neck, head = PillarGridConfig(), NeckSpec(), 64
        else:
            raise ConfigError(f"grid: expected 'toy', 'full' or a PillarGridConfig, got {self.grid!r}")
        dec = DecodeConfig(score_threshold=self.score_threshold, alpha=self.alpha)
        return ModelConfig(grid=grid, backbone=self._spec(), neck=neck, head_channels=head,
                           num_classes=self.num_classes, decode=dec)

    def _seed(self):
        rs = self.random_state
        if rs is None:
            return int(np.random.SeedSequence().entropy % (2 ** 31))
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        raise ValueError("random_state must be an int or None")

    # ---------------------------------------------------------------- api

    def _scenes(self, X, y):
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
        if len(X) == 0:
            raise ValueError("fit needs at least one scene")
        return [Scene(_as_cloud(x, i), _as_boxes(b, i, self.num_classes), f"scene_{i:05d}")
                for i, (x, b) in enumerate(zip(X, y))]

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on point clouds ``X`` with per-scene box lists ``y``."""
        scenes = self._scenes(X, y)
        val = self._scenes(X_val, y_val) if X_val is not None else None
        seed = self._seed()
        model = PillarNeSt(self._model_config()).initialize(np.random.default_rng([seed, 17]))
        if self.init_checkpoint is not None:
            src = self.init_checkpoint
            if not isinstance(src, CheckpointArchive):
                src = CheckpointArchive.load(src)
            adapted, self.adaptation_report_ = adapt(src, model.config.backbone, np.random.default_rng([seed, 18]))
            load(adapted, model.backbone)
        cfg = TrainConfig(epochs=self.epochs, fade_epochs=min(self.fade_epochs, self.epochs),
                          batch_size=self.batch_size, peak_lr=self.peak_lr, weight_decay=self.weight_decay,
                          copy_paste=self.copy_paste, seed=seed, eval_every=1 if val else 0)
        _, self.history_ = train(cfg, model, scenes, val=val, log=print if self.verbose else None)
        self.model_ = model
        self.n_features_in_ = 5
        return self

    def predict(self, X):
        """Detected boxes per cloud, each carrying ``score`` and ``iou_score``."""
        check_is_fitted(self, "model_")
        clouds = [_as_cloud(x, i) for i, x in enumerate(X)]
        out = []
        for i in range(0, len(clouds), 8):
            out.extend(self.model_.detect(clouds[i:i + 8]))
        return out

    def score(self, X, y):
        """Center-distance mAP on the given scenes."""
        check_is_fitted(self, "model_")
        return evaluate_model(self.model_, self._scenes(X, y)).mAP

    def save(self, path):
        check_is_fitted(self, "model_")
        from .checkpoint import save
        save(self.model_).save(path)

    def load_weights(self, path):
        """Load a full-model archive into a freshly configured model (no training)."""
        model = PillarNeSt(self._model_config())
        load(CheckpointArchive.load(path), model)
        self.model_ = model
        self.n_features_in_ = 5
        return self


__all__ = ["PillarNeStDetector", "NotFittedError"]
