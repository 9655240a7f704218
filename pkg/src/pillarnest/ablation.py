"""Backbone ablation grids: stage-5, stage-1 downsampling, input width, block counts."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import count_flops, count_params, make_spec
from .pillars import ConfigError

# Reduced four-stage base used by every ablation: one block per stage, tiny widths.
BASE_BLOCKS = (1, 1, 1, 1)
BASE_CHANNELS = (48, 96, 96, 96)
AXES = ("stage5", "stage1-downsample", "input-channels", "blocks")


def variants(axis, stage=1, counts=(1, 2, 3, 4, 6), widths=(32, 48, 64, 96, 128)):
    """Ordered (name, BackboneSpec) pairs for one ablation axis."""
    if axis == "stage5":
        return [("4-stage", make_spec(BASE_BLOCKS, BASE_CHANNELS)),
                ("5-stage", make_spec(BASE_BLOCKS + (1,), BASE_CHANNELS + (BASE_CHANNELS[-1],)))]
    if axis == "stage1-downsample":
        return [("no-downsample", make_spec(BASE_BLOCKS, BASE_CHANNELS)),
                ("downsample", make_spec(BASE_BLOCKS, BASE_CHANNELS, stage1_downsample=True))]
    if axis == "input-channels":
        return [(f"c{c}", make_spec(BASE_BLOCKS, (c,) + BASE_CHANNELS[1:])) for c in widths]
    if axis == "blocks":
        if not 1 <= stage <= 4:
            raise ConfigError(f"--stage must be 1..4, got {stage}")
        out = []
        for n in counts:
            # earlier stages at 2 blocks, later ones at 1
            blocks = tuple(2 if i < stage - 1 else (n if i == stage - 1 else 1) for i in range(4))
            out.append((f"stage{stage}-x{n}", make_spec(blocks, BASE_CHANNELS)))
        return out
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def _run_one(job):
    from .backbone import BackboneSpec
    from .benchmark import FULL_SCENES, ToyBenchmark, run_variant
    name, spec_dict, seed, epochs, n_train, n_val, out_dir, full = job
    spec = BackboneSpec.from_dict(spec_dict)
    bench = ToyBenchmark(n_train=n_train, n_val=n_val)
    if full:
        bench.scene_config = FULL_SCENES
    train_set, val_set = bench.datasets()
    run_dir = Path(out_dir) / name / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    _, records, final = run_variant(spec, seed, train_set, val_set, epochs=epochs, eval_every=0,
                                    log=lines.append, full=full)
    lines.append(json.dumps({"final_mAP": final}, sort_keys=True))
    (run_dir / "metrics.jsonl").write_text("".join(line + "\n" for line in lines))
    return name, seed, final, [r["loss"] for r in records]


def run_axis(axis, out_dir, seeds=(0, 1, 2), epochs=40, n_train=64, n_val=16, jobs=1, input_hw=None,
             stage=1, log=None, full=False):
    """Train every (variant, seed) pair and write ``summary.csv`` plus ``curves.svg``.

    ``full`` switches from the 96 x 96 toy grid to the 720 x 720 one over a
    108 m square (orders of magnitude slower).
    """
    input_hw = input_hw or (720 if full else 96)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    var = variants(axis, stage=stage)
    job_list = [(name, spec.to_dict(), s, epochs, n_train, n_val, str(out_dir), full)
                for name, spec in var for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, job_list))
    else:
        results = []
        for job in job_list:
            results.append(_run_one(job))
            if log:
                log(f"{job[0]} seed {job[2]}: mAP {results[-1][2]:.4f}")
    by_name = {}
    for name, seed, final, losses in results:
        by_name.setdefault(name, []).append((seed, final, losses))
    rows = []
    for name, spec in var:
        runs = sorted(by_name[name])
        maps = [r[1] for r in runs]
        rows.append({"variant": name, "mean_mAP": f"{np.mean(maps):.6f}", "std_mAP": f"{np.std(maps):.6f}",
                     "seed_mAPs": ";".join(f"{m:.6f}" for m in maps),
                     "seeds": ";".join(str(r[0]) for r in runs),
                     "params": count_params(spec), "flops": count_flops(spec, input_hw),
                     "stages": len(spec.stages), "blocks": "-".join(str(s.n_blocks) for s in spec.stages),
                     "in_channels": spec.in_channels,
                     "stage1_downsample": spec.stages[0].downsample})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out_dir / "summary.csv").write_text(buf.getvalue())
    (out_dir / "summary.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    plot_curves(by_name, out_dir / "curves.svg", f"ablation: {axis}")
    return rows


def plot_curves(by_name, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "pillarnest"
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in by_name:
        curves = np.array([r[2] for r in sorted(by_name[name])], dtype=float)
        ax.plot(np.arange(1, curves.shape[1] + 1), curves.mean(axis=0), label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (mean over seeds)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def worker_cap():
    """Upper bound on worker processes from PILLARNEST_THREADS (unset: CPU count)."""
    raw = os.environ.get("PILLARNEST_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PILLARNEST_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PILLARNEST_THREADS must be a positive integer, got {raw!r}")
    return n
