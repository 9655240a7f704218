#!/usr/bin/env python3
"""Convert a PyTorch ConvNeXt state dict into a pillarnest checkpoint archive.

Understands three key layouts:

* the original release (``downsample_layers.*``, ``stages.i.j.*``),
* timm (``stem.*``, ``stages.i.downsample.*``, ``stages.i.blocks.j.conv_dw``/``mlp.fc1``/...),
* torchvision (``features.k.*``).

The image stem, the final norm and the classifier are dropped: a pillar
backbone starts from the pseudo-image, so only the four stages carry over.
The result is a full-width source archive; feed it to ``pillarnest adapt-ckpt``
to obtain weights for a particular preset.

Examples::

    python scripts/convert_convnext.py --source convnext_tiny_1k_224.pth --out convnext_t.ckpt
    python scripts/convert_convnext.py --torchvision convnext_tiny --out convnext_t.ckpt   # downloads weights

Requires ``torch`` (``pip install artifact[convert]``).
"""
from __future__ import annotations

import argparse
import re
import sys

import numpy as np

from pillarnest.checkpoint import CheckpointArchive

BLOCK_PARTS = {
    # original release
    "dwconv": "dwconv", "norm": "norm", "pwconv1": "pwconv1", "pwconv2": "pwconv2", "gamma": "gamma",
    # timm
    "conv_dw": "dwconv", "mlp.fc1": "pwconv1", "mlp.fc2": "pwconv2",
    # torchvision (Sequential indices inside ``block``)
    "block.0": "dwconv", "block.2": "norm", "block.3": "pwconv1", "block.5": "pwconv2", "layer_scale": "gamma",
}
DOWNSAMPLE_PARTS = {"0": "norm", "1": "conv"}


def _block_name(stage, block, rest):
    for src, dst in BLOCK_PARTS.items():
        if rest == src or rest.startswith(src + "."):
            return f"stages.{stage}.blocks.{block}.{dst}{rest[len(src):]}"
    raise ValueError(f"unrecognised block tensor {rest!r}")


def rename(key):
    """Archive name for one source key, or None for tensors that do not transfer."""
    key = key.removeprefix("module.").removeprefix("model.")
    if re.match(r"(stem|head|norm|fc|classifier)\.", key) or key.startswith("downsample_layers.0."):
        return None
    if m := re.fullmatch(r"downsample_layers\.(\d)\.(\d)\.(weight|bias)", key):
        return f"stages.{m[1]}.downsample.{DOWNSAMPLE_PARTS[m[2]]}.{m[3]}"
    if m := re.fullmatch(r"stages\.(\d)\.downsample\.(\d)\.(weight|bias)", key):
        return f"stages.{m[1]}.downsample.{DOWNSAMPLE_PARTS[m[2]]}.{m[3]}"
    if m := re.fullmatch(r"stages\.(\d)\.blocks\.(\d+)\.(.+)", key):
        return _block_name(int(m[1]), int(m[2]), m[3])
    if m := re.fullmatch(r"stages\.(\d)\.(\d+)\.(.+)", key):
        return _block_name(int(m[1]), int(m[2]), m[3])
    if m := re.fullmatch(r"features\.(\d)\.(.+)", key):
        k, rest = int(m[1]), m[2]
        if k == 0:
            return None
        if k % 2 == 0:  # features.2/4/6 are the downsampling layers in front of stages 1..3
            d = re.fullmatch(r"(\d)\.(weight|bias)", rest)
            return f"stages.{k // 2}.downsample.{DOWNSAMPLE_PARTS[d[1]]}.{d[2]}"
        b = re.fullmatch(r"(\d+)\.(.+)", rest)
        return _block_name((k - 1) // 2, int(b[1]), b[2])
    raise ValueError(f"unrecognised ConvNeXt tensor {key!r}")


def convert(state_dict):
    """Map a ConvNeXt state dict (name -> array-like) to a CheckpointArchive."""
    out = {}
    for key, value in state_dict.items():
        name = rename(key)
        if name is None:
            continue
        a = np.asarray(value.detach().cpu().numpy() if hasattr(value, "detach") else value, dtype=np.float32)
        if name.endswith(("pwconv1.weight", "pwconv2.weight")) and a.ndim == 2:
            a = a[:, :, None, None]  # linear layers become 1x1 convolutions
        if name.endswith(".gamma"):
            a = a.reshape(-1)  # torchvision stores layer scale as (C, 1, 1)
        out[name] = a
    if not out:
        raise ValueError("no ConvNeXt stage tensors found")
    return CheckpointArchive(dict(sorted(out.items(), key=lambda kv: _order(kv[0]))))


_RANK = {"downsample": 0, "blocks": 1, "dwconv": 0, "norm": 1, "conv": 2, "pwconv1": 2, "pwconv2": 3,
         "gamma": 4, "weight": 0, "bias": 1}


def _order(name):
    """Sort key reproducing the backbone's parameter declaration order."""
    return tuple(int(p) if p.isdigit() else _RANK.get(p, -1) for p in name.split("."))


def load_state_dict(path):
    import torch
    obj = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("model", "state_dict", "model_ema"):
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            return obj[key]
    return obj


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", help=".pth/.pt file holding a ConvNeXt state dict")
    src.add_argument("--torchvision", metavar="ARCH", help="torchvision model name, e.g. convnext_tiny (downloads)")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    if args.source:
        sd = load_state_dict(args.source)
    else:
        import torchvision
        sd = torchvision.models.get_model(args.torchvision, weights="DEFAULT").state_dict()
    arc = convert(sd)
    arc.save(args.out)
    print(f"wrote {len(arc)} tensors ({arc.num_elements():,} values) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
