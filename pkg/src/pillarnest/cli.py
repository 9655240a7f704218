"""Command-line entry point: ``pillarnest <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("pillarnest")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def code_hash(version=__version__):
    """Git blob hash of the version string."""
    data = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _emit(obj, as_json):
    if as_json:
        print(json.dumps(obj, sort_keys=True))
    else:
        for k, v in obj.items():
            print(f"{k}: {v}")


def _apply_thread_cap():
    raw = os.environ.get("PILLARNEST_THREADS")
    if raw is None:
        return
    from .ablation import worker_cap
    n = worker_cap()
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
        pass


def _load_config(args, toy_default=False):
    from .config import RunConfig
    toy = getattr(args, "toy", False) or toy_default
    preset_name = getattr(args, "preset", None)
    if getattr(args, "config", None):
        return RunConfig.load(args.config, toy=toy, preset_name=preset_name)
    return RunConfig.from_dict({}, toy=toy, preset_name=preset_name)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    from .data import SceneConfig, generate_dataset
    cfg = SceneConfig()
    if args.config:
        try:
            cfg = SceneConfig.from_dict(json.loads(Path(args.config).read_text()))
        except TypeError as e:
            from .pillars import ConfigError
            raise ConfigError(f"scene config: {e}") from None
    scenes = generate_dataset(args.out, args.seed, args.n, cfg)
    _emit({"scenes": len(scenes), "boxes": sum(len(s.boxes) for s in scenes),
           "points": sum(len(s.cloud) for s in scenes), "out": str(args.out)}, args.json)


def cmd_build_model(args):
    from .backbone import count_flops, count_params, stage_table
    cfg = _load_config(args)
    spec = cfg.backbone
    hw = args.input
    out = {"params": count_params(spec), "flops": count_flops(spec, hw), "input": hw,
           "in_channels": spec.in_channels, "stages": stage_table(spec, hw)}
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"backbone params: {out['params']:,}  ({out['params'] / 1e6:.2f} M)")
        print(f"backbone FLOPs at {hw}x{hw}: {out['flops'] / 1e9:.2f} G (1 MAC = 1 FLOP)")
        for row in out["stages"]:
            print(f"  stage-{row['stage']}: {row['output']:>9}  C={row['channels']:<4} "
                  f"blocks={row['blocks']}  downsample={row['downsample']}")


def cmd_adapt_ckpt(args):
    from .checkpoint import CheckpointArchive, adapt
    cfg = _load_config(args)
    source = CheckpointArchive.load(args.source)
    archive, report = adapt(source, cfg.backbone, np.random.default_rng(args.seed))
    archive.save(args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    _emit({"tensors": len(archive), "counts": report.counts(), "out": str(args.out)}, args.json)


def write_pseudo_image(path, image):
    """Little-endian float32 dump preceded by a length-prefixed JSON header."""
    arr = np.ascontiguousarray(image, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f4", "order": "C"}).encode()
    Path(path).write_bytes(struct.pack("<I", len(header)) + header + arr.tobytes())


def read_pseudo_image(path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", raw)
    header = json.loads(raw[4:4 + n])
    return np.frombuffer(raw[4 + n:], dtype=header["dtype"]).reshape(header["shape"])


def cmd_pillarize(args):
    from . import tensor as T
    from .data import read_points
    from .model import PillarNeSt
    from .pillars import grid_shape, pillarize
    cfg = _load_config(args)
    cloud = read_points(args.points, args.fields)
    pt = pillarize(cloud, cfg.grid, np.random.default_rng(args.seed))
    H, W = grid_shape(cfg.grid)
    out = {"points": len(cloud), "pillars": pt.num_pillars, "grid": [H, W], "points_kept": int(pt.counts.sum()),
           "max_points_per_pillar": int(pt.counts.max()) if pt.num_pillars else 0}
    if args.dump_grid:
        model = PillarNeSt(cfg.model)
        if args.ckpt:
            _load_weights(model, args.ckpt)
        else:
            model.initialize(np.random.default_rng([args.seed, 17]))
        batch = model.make_batch([cloud], [np.random.default_rng(args.seed)])
        with T.no_grad():
            image = model.encoder(batch, (H, W)).data[0]
        write_pseudo_image(args.dump_grid, image)
        out["pseudo_image"] = str(args.dump_grid)
        out["shape"] = list(image.shape)
    _emit(out, args.json)


def _dataset(cfg, args):
    from .data import SceneConfig, load_scene_dir, generate_scene
    d = cfg.data
    train_dir = args.train_data or d["train_dir"]
    val_dir = args.val_data or d["val_dir"]
    sc = SceneConfig(x_range=cfg.grid.x_range, y_range=cfg.grid.y_range)
    if train_dir:
        train = load_scene_dir(train_dir)
    else:
        train = [generate_scene(d["seed"] * 100003 + i, sc, f"train_{i:04d}") for i in range(d["n_train"])]
    if val_dir:
        val = load_scene_dir(val_dir)
    else:
        val = [generate_scene(d["seed"] * 100003 + 50000 + i, sc, f"val_{i:04d}") for i in range(d["n_val"])]
    return train, val


def _load_weights(model, path):
    from .checkpoint import CheckpointArchive, load
    arc = CheckpointArchive.load(path)
    if any(n.startswith("backbone.") for n in arc):
        load(arc, model)
    else:
        load(arc, model.backbone)


def cmd_train(args):
    from .model import PillarNeSt
    from .train import train
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    (out / "version.json").write_text(json.dumps({"version": __version__, "code_hash": code_hash()},
                                                 sort_keys=True) + "\n")
    train_set, val_set = _dataset(cfg, args)
    if not train_set:
        raise RuntimeError("training set is empty")
    model = PillarNeSt(cfg.model).initialize(np.random.default_rng([cfg.train.seed, 17]))
    if args.init_ckpt:
        _load_weights(model, args.init_ckpt)
    _, records = train(cfg.train, model, train_set, val=val_set or None, out_dir=out,
                       log=None if args.quiet else print)
    summary = {"epochs": len(records), "final_loss": records[-1]["loss"], "final_mAP": records[-1].get("mAP"),
               "run_dir": str(out)}
    if args.json:
        print(json.dumps(summary, sort_keys=True))


def cmd_infer(args):
    from .data import read_points
    from .model import PillarNeSt
    cfg = _load_config(args)
    model = PillarNeSt(cfg.model)
    _load_weights(model, args.ckpt)
    cloud = read_points(args.points, args.fields)
    dets = model.detect([cloud])[0]
    doc = {"scene_id": Path(args.points).stem, "boxes": [b.to_dict() for b in dets]}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True))
    _emit({"detections": len(dets), "out": str(args.out)}, args.json)


def cmd_eval(args):
    from .data import Box3D, read_labels
    from .evaluation import evaluate
    gts = {}
    for p in sorted(Path(args.gt).glob("*.json")):
        sid, _, boxes = read_labels(p)
        gts[sid] = boxes
    preds = {}
    for p in sorted(Path(args.pred).glob("*.json")):
        doc = json.loads(p.read_text())
        boxes = doc["boxes"] if isinstance(doc, dict) else doc
        sid = doc.get("scene_id", p.stem) if isinstance(doc, dict) else p.stem
        preds[sid] = [Box3D.from_dict(b) for b in boxes]
    if not gts:
        raise ValueError(f"{args.gt}: no label files found")
    res = evaluate(preds, gts)
    Path(args.out).write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True))
    d = res.to_dict()
    _emit({"mAP": d["mAP"], "mATE": d["mATE"], "mAOE": d["mAOE"], "out": str(args.out)}, args.json)


def cmd_ablate(args):
    from .ablation import run_axis, worker_cap
    jobs = max(1, min(args.jobs, worker_cap()))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out or f"ablate_{args.axis}")
    rows = run_axis(args.axis, out, seeds=seeds, epochs=args.epochs, n_train=args.n_train, n_val=args.n_val,
                    jobs=jobs, stage=args.stage, log=None if args.quiet else print, full=args.full)
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['variant']:>16}  mAP {r['mean_mAP']}  (+/- {r['std_mAP']})")
        print(f"wrote {out / 'summary.csv'}")


# ---------------------------------------------------------------- parser


def _common(p, config=True, preset=True):
    if config:
        p.add_argument("--config", help="JSON run configuration (merged over defaults)")
        p.add_argument("--toy", action="store_true", help="start from the 96x96 toy defaults")
    if preset:
        p.add_argument("--preset", choices=["tiny", "small", "base", "large"], help="backbone preset")
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")


def build_parser():
    ap = argparse.ArgumentParser(prog="pillarnest", description="Pillar-based 3-D detection toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="scene-generator JSON")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("build-model", help="report backbone size and FLOPs")
    _common(p)
    p.add_argument("--input", type=int, default=720, help="square pseudo-image size")
    p.set_defaults(fn=cmd_build_model)

    p = sub.add_parser("adapt-ckpt", help="adapt a pretrained staged checkpoint to a backbone")
    _common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_adapt_ckpt)

    p = sub.add_parser("pillarize", help="bucket a point file into pillars")
    _common(p, preset=False)
    p.add_argument("--points", required=True)
    p.add_argument("--fields", type=int, default=5, choices=[4, 5])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-grid", help="write the encoded pseudo-image (float32 with JSON shape header)")
    p.add_argument("--ckpt", help="model archive whose encoder produces the dump (default: seeded init)")
    p.set_defaults(fn=cmd_pillarize)

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--init-ckpt", help="backbone (or full-model) archive to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--train-data")
    p.add_argument("--val-data")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="detect boxes in one point file")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--fields", type=int, default=5, choices=[4, 5])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score detections against labelled scenes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a toy ablation grid")
    p.add_argument("--axis", required=True, choices=["stage5", "stage1-downsample", "input-channels", "blocks"])
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--stage", type=int, default=1, help="stage swept by --axis blocks")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--full", action="store_true",
                   help="720 x 720 grid over a 108 m square instead of the 96 x 96 toy grid (very slow)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None):
    from .pillars import ConfigError
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
