"""The fixed toy benchmark used by ablations and trend checks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneSpec, preset
from .checkpoint import adapt, load, save
from .data import ClassPrior, SceneConfig, generate_scene
from .head import DecodeConfig, NeckSpec
from .model import ModelConfig, PillarNeSt, toy_grid
from .pillars import PillarGridConfig
from .train import TrainConfig, evaluate_model, train

TOY_NECK = NeckSpec(lateral_channels=32, out_channels=64)
TOY_HEAD_CHANNELS = 32

# A disjoint scene distribution for producing a "pretrained" source checkpoint:
# other object shapes, densities and ground height than the default classes.
SOURCE_CLASSES = (
    ClassPrior("truck", (6.0, 2.4, 2.6), 1, (0.5, 1.0)),
    ClassPrior("cyclist", (1.7, 0.6, 1.5), 3, (0.1, 0.4)),
    ClassPrior("cone", (0.4, 0.4, 0.8), 4, (0.6, 0.9)),
)
SOURCE_SCENES = SceneConfig(classes=SOURCE_CLASSES, ground_z=-1.8, surface_density=15.0)


@dataclass
class ToyBenchmark:
    n_train: int = 64
    n_val: int = 16
    data_seed: int = 7
    scene_config: SceneConfig = field(default_factory=SceneConfig)

    def datasets(self):
        base = 1_000_000 * (self.data_seed + 1)
        train = [generate_scene(base + i, self.scene_config, f"train_{i:04d}") for i in range(self.n_train)]
        val = [generate_scene(base + 500_000 + i, self.scene_config, f"val_{i:04d}") for i in range(self.n_val)]
        return train, val


def toy_model_config(spec=None, num_classes=3, **overrides):
    cfg = ModelConfig(grid=toy_grid(), backbone=spec or preset("tiny"), neck=TOY_NECK,
                      head_channels=TOY_HEAD_CHANNELS, num_classes=num_classes, decode=DecodeConfig())
    return replace(cfg, **overrides) if overrides else cfg


FULL_SCENES = SceneConfig(x_range=(-54.0, 54.0), y_range=(-54.0, 54.0), ground_points=60000)


def full_model_config(spec=None, num_classes=3):
    """The 720 x 720 grid with the default neck and head widths."""
    return ModelConfig(grid=PillarGridConfig(), backbone=spec or preset("tiny"), num_classes=num_classes)


def build_model(spec, seed, num_classes=3, init_archive=None, encoder_archive=None, full=False):
    """Fresh toy model; optionally adapt the backbone from a pretrained archive.

    ``encoder_archive`` maps encoder parameter names to arrays copied verbatim
    (the pillar encoder has the same shape in every variant).
    """
    cfg = full_model_config(spec, num_classes) if full else toy_model_config(spec, num_classes)
    model = PillarNeSt(cfg).initialize(np.random.default_rng([seed, 17]))
    report = None
    if init_archive is not None:
        adapted, report = adapt(init_archive, spec, np.random.default_rng([seed, 18]))
        load(adapted, model.backbone)
    if encoder_archive is not None:
        own = dict(model.encoder.named_parameters())
        for name, arr in encoder_archive.items():
            if name not in own or own[name].shape != arr.shape:
                raise ValueError(f"encoder tensor {name!r} does not fit this model")
            own[name].data = arr.astype(own[name].data.dtype, copy=True)
    return model, report


def train_config(seed, epochs=40, **kw):
    return TrainConfig(epochs=epochs, fade_epochs=min(5, epochs), batch_size=4, seed=seed, **kw)


def run_variant(spec, seed, train_set, val_set, epochs=40, eval_every=0, stop_at_map=None,
                init_archive=None, encoder_archive=None, num_classes=3, log=None, full=False):
    """Train one seeded variant; returns (model, per-epoch records, final validation mAP)."""
    model, _ = build_model(spec, seed, num_classes, init_archive, encoder_archive, full)
    cfg = train_config(seed, epochs, eval_every=eval_every)
    _, records = train(cfg, model, train_set, val=val_set, log=log, stop_at_map=stop_at_map)
    final = records[-1].get("mAP")
    if final is None and val_set:
        final = float(f"{evaluate_model(model, val_set).mAP:.9g}")
    return model, records, final


def source_checkpoint(seed=0, n_scenes=64, epochs=40, log=None):
    """Backbone and encoder weights of a toy run on the disjoint source distribution.

    The run follows the benchmark recipe (scene count, epochs, optimizer) so the
    source is as converged as any benchmark variant.
    """
    bench = ToyBenchmark(n_train=n_scenes, n_val=0, data_seed=100 + seed, scene_config=SOURCE_SCENES)
    train_set, _ = bench.datasets()
    model, _ = build_model(preset("tiny"), 1000 + seed, num_classes=len(SOURCE_CLASSES))
    cfg = train_config(1000 + seed, epochs, eval_every=0)
    train(cfg, model, train_set, log=log)
    return save(model.backbone), {n: p.data.copy() for n, p in model.encoder.named_parameters()}


def pretraining_trend(seeds=(0, 1, 2), epochs=40, source=None, bench=None, log=None):
    """Epochs a pretrained-init run needs to reach the random-init final mAP, per seed.

    Returns a dict with per-seed targets and epoch counts plus ``mean_fraction``,
    the mean over seeds of epochs-to-reach divided by ``epochs``. A seed that
    never reaches its target contributes None and makes the mean None.
    """
    bench = bench or ToyBenchmark()
    train_set, val_set = bench.datasets()
    init, enc = source if source is not None else source_checkpoint(0)
    spec = preset("tiny")
    runs = []
    for seed in seeds:
        _, _, target = run_variant(spec, seed, train_set, val_set, epochs=epochs)
        _, records, _ = run_variant(spec, seed, train_set, val_set, epochs=epochs, eval_every=1,
                                    stop_at_map=target, init_archive=init, encoder_archive=enc)
        reach = epochs_to_reach(records, target)
        runs.append({"seed": seed, "random_final_mAP": target, "pretrained_epochs": reach,
                     "pretrained_curve": [r.get("mAP") for r in records]})
        if log:
            log(json.dumps(runs[-1], sort_keys=True))
    fractions = [r["pretrained_epochs"] / epochs if r["pretrained_epochs"] else None for r in runs]
    mean = None if None in fractions else float(np.mean(fractions))
    return {"runs": runs, "fractions": fractions, "mean_fraction": mean}


def epochs_to_reach(records, target):
    """1-based epoch at which validation mAP first reaches ``target`` (None if never)."""
    for r in records:
        if r.get("mAP") is not None and r["mAP"] >= target:
            return r["epoch"] + 1
    return None
