"""One-cycle AdamW training with copy-paste augmentation that fades out at the end."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save
from .data import GtSampleDatabase, copy_paste
from .evaluation import evaluate
from .losses import LossWeights, encode_targets, total_loss
from .pillars import ConfigError

WARM_FRACTION = 0.4
START_DIV = 10.0
FINAL_DIV = 1e4


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    fade_epochs: int = 5
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    momentum_range: tuple = (0.85, 0.95)
    beta2: float = 0.999
    batch_size: int = 4
    seed: int = 0
    copy_paste: int = 1
    grad_clip: float = 35.0
    eval_every: int = 1
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    iou_encoding: str = "raw"

    def __post_init__(self):
        self.momentum_range = tuple(self.momentum_range)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.fade_epochs <= self.epochs:
            raise ConfigError(f"fade_epochs must lie in [0, epochs], got {self.fade_epochs}")
        lo, hi = self.momentum_range
        if not 0 <= lo <= hi < 1:
            raise ConfigError("momentum_range must satisfy 0 <= low <= high < 1")

    def to_dict(self):
        d = asdict(self)
        d["momentum_range"] = list(self.momentum_range)
        return d

    def augment(self, epoch):
        return self.copy_paste > 0 and epoch < self.epochs - self.fade_epochs


def _cos(start, end, frac):
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(step, total_steps, config):
    """(lr, momentum) for ``step`` of a single warm-up/anneal cycle."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lo, hi = config.momentum_range
    peak = config.peak_lr
    warm = WARM_FRACTION * total_steps
    if step <= warm and warm > 0:
        f = step / warm
        return _cos(peak / START_DIV, peak, f), _cos(hi, lo, f)
    f = (step - warm) / max(total_steps - 1 - warm, 1e-12)
    return _cos(peak, peak / FINAL_DIV, min(f, 1.0)), _cos(lo, hi, min(f, 1.0))


class AdamW:
    """Adam with decoupled weight decay applied to matrices and kernels only."""

    def __init__(self, params, weight_decay=0.01, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr, beta1):
        self.t += 1
        b2 = self.beta2
        c1 = 1.0 - beta1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay and p.ndim > 1:
                p.data *= 1.0 - lr * self.weight_decay
            m *= beta1
            m += (1.0 - beta1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def scene_rng(seed, epoch, purpose, index):
    return np.random.default_rng([seed, epoch, purpose, index])


def predict_scenes(model, scenes, batch_size=8):
    out = {}
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        for sc, dets in zip(chunk, model.detect([s.cloud for s in chunk])):
            out[sc.scene_id] = dets
    return out


def evaluate_model(model, scenes):
    preds = predict_scenes(model, scenes)
    return evaluate(preds, {s.scene_id: s.boxes for s in scenes},
                    classes=list(range(model.config.num_classes)))


def _fmt(x):
    return float(f"{x:.9g}")


def train(config, model, dataset, val=None, out_dir=None, log=None, stop_at_map=None):
    """Train ``model`` in place; returns (archive, list of per-epoch records).

    When ``stop_at_map`` is given, training ends after the first evaluated
    epoch whose validation mAP reaches it.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    params = list(model.parameters())
    names = [n for n, _ in model.named_parameters()]
    opt = AdamW(params, config.weight_decay, config.beta2)
    db = GtSampleDatabase.from_scenes(dataset) if config.copy_paste > 0 else None
    grid = model.config.grid
    area = (grid.x_range[0], grid.x_range[1], grid.y_range[0], grid.y_range[1])
    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    step = 0
    records = []
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    for epoch in range(config.epochs):
        aug = config.augment(epoch)
        order = epoch_order(config.seed, epoch, n)
        aug_rng = scene_rng(config.seed, epoch, 1, 0)
        sums = {"loss": 0.0, "cls": 0.0, "iou": 0.0, "reg": 0.0}
        lr = mom = 0.0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            scenes = [dataset[i] for i in idx]
            if aug:
                scenes = [copy_paste(s, db, config.copy_paste, aug_rng, area=area) for s in scenes]
            rngs = [scene_rng(config.seed, epoch, 2, int(i)) for i in idx]
            batch = model.make_batch([s.cloud for s in scenes], rngs)
            targets = [encode_targets(s.boxes, grid, model.config.num_classes, model.stride) for s in scenes]
            lr, mom = one_cycle_lr(step, total, config)
            out = model(batch)
            loss, comps = total_loss(out, targets, config.loss_weights, grid, model.stride, config.iou_encoding)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(_diagnose(epoch, step, lr, comps, params, names))
            model.zero_grad()
            T.backward(loss)
            clip_grad_norm(params, config.grad_clip)
            opt.step(lr, mom)
            step += 1
            w = len(idx)
            sums["loss"] += value * w
            for k in ("cls", "iou", "reg"):
                sums[k] += comps[k].item() * w
        rec = {"epoch": epoch, "augment": aug, "lr": _fmt(lr), "momentum": _fmt(mom)}
        rec.update({k: _fmt(v / n) for k, v in sums.items()})
        if val and config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            res = evaluate_model(model, val)
            rec["mAP"] = _fmt(res.mAP)
            rec["mATE"] = None if math.isnan(res.mATE) else _fmt(res.mATE)
            rec["mAOE"] = None if math.isnan(res.mAOE) else _fmt(res.mAOE)
        records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(line + "\n")
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save(model).save(out_dir / f"epoch_{epoch + 1:03d}.ckpt")
        if log is not None:
            log(line)
        if stop_at_map is not None and rec.get("mAP") is not None and rec["mAP"] >= stop_at_map:
            break
    archive = save(model)
    if out_dir is not None:
        archive.save(out_dir / "model.ckpt")
    return archive, records


def augmentation_pattern(records):
    return "".join("T" if r["augment"] else "F" for r in records)


def _diagnose(epoch, step, lr, comps, params, names):
    norms = []
    for name, p in zip(names, params):
        if p.grad is not None:
            norms.append((float(np.sqrt(np.sum(p.grad.astype(np.float64) ** 2))), name))
    norms.sort(reverse=True)
    parts = ", ".join(f"{k}={v.item():.4g}" for k, v in comps.items())
    top = ", ".join(f"{nm}={v:.3g}" for v, nm in norms[:5]) or "none yet"
    return (f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}; {parts}); "
            f"largest grad norms from the previous step: {top}")


def dead_parameters(model):
    """Names of parameters whose gradient after the last backward pass is missing or all zero."""
    return [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
