"""Named-tensor archives and pretrained-weight adaptation across backbone layouts.

On-disk layout::

    b"PNSTCKPT" | uint32 version | uint64 manifest length | UTF-8 JSON manifest | blob

The manifest is a list of {name, shape, dtype, offset} in blob order; the blob
is the contiguous little-endian float32 payload.
"""
from __future__ import annotations

import json
import re
import struct
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .nn import init_parameters

MAGIC = b"PNSTCKPT"
VERSION = 1


class ArchiveError(ValueError):
    pass


class AdaptationError(ValueError):
    pass


class CheckpointArchive:
    def __init__(self, tensors=None):
        self.tensors = OrderedDict()
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __setitem__(self, name, arr):
        self.tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def num_elements(self):
        return sum(a.size for a in self.tensors.values())

    def manifest(self):
        out, off = [], 0
        for name, arr in self.tensors.items():
            out.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": off})
            off += arr.size * 4
        return out

    def to_bytes(self):
        man = json.dumps(self.manifest(), separators=(",", ":")).encode("utf-8")
        blob = b"".join(a.astype("<f4").tobytes() for a in self.tensors.values())
        return MAGIC + struct.pack("<IQ", VERSION, len(man)) + man + blob

    @classmethod
    def from_bytes(cls, raw):
        if raw[:8] != MAGIC:
            raise ArchiveError("bad magic: not a checkpoint archive")
        if len(raw) < 20:
            raise ArchiveError("truncated header")
        version, mlen = struct.unpack("<IQ", raw[8:20])
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        if 20 + mlen > len(raw):
            raise ArchiveError("manifest length exceeds file size")
        try:
            manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ArchiveError(f"unreadable manifest: {e}") from None
        blob = raw[20 + mlen:]
        arc, expect, seen = cls(), 0, set()
        for i, ent in enumerate(manifest):
            try:
                name, shape, dtype, off = ent["name"], ent["shape"], ent["dtype"], ent["offset"]
            except (KeyError, TypeError):
                raise ArchiveError(f"manifest entry {i} is malformed") from None
            if name in seen:
                raise ArchiveError(f"duplicate tensor name {name!r}")
            seen.add(name)
            if dtype != "float32":
                raise ArchiveError(f"{name}: unsupported dtype {dtype}")
            if not isinstance(off, int) or off != expect:
                raise ArchiveError(f"{name}: offset {off} breaks contiguous layout (expected {expect})")
            n = int(np.prod(shape)) if shape else 1
            if off + 4 * n > len(blob):
                raise ArchiveError(f"{name}: data runs past the end of the blob")
            arc.tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
            expect = off + 4 * n
        if expect != len(blob):
            raise ArchiveError(f"blob has {len(blob) - expect} trailing bytes not covered by the manifest")
        return arc

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def save(model):
    return CheckpointArchive({n: p.data for n, p in model.named_parameters()})


def load(archive, model):
    """Copy every tensor into ``model``; names and shapes must agree exactly."""
    own = dict(model.named_parameters())
    missing = [n for n in own if n not in archive]
    if missing:
        raise ArchiveError(f"archive lacks tensor {missing[0]!r} ({len(missing)} missing)")
    extra = [n for n in archive if n not in own]
    if extra:
        raise ArchiveError(f"archive has unexpected tensor {extra[0]!r}")
    for name, p in own.items():
        arr = archive[name]
        if arr.shape != p.shape:
            raise ArchiveError(f"tensor {name!r}: archive shape {arr.shape} != model shape {p.shape}")
    for name, p in own.items():
        p.data = archive[name].astype(p.data.dtype, copy=True)
    return model


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def init_backbone(backbone, rng):
    init_parameters(backbone, _rng(rng), overrides={"gamma": backbone.spec.layer_scale_init})
    return backbone


def init_random(spec, rng):
    """Truncated-normal (std 0.02) weights, zero biases, unit norms, layer scale at its init."""
    return save(init_backbone(Backbone(spec), rng))


# ---------------------------------------------------------------- adaptation

_STAGE_RE = re.compile(r"^(?P<prefix>.*?)stages\.(?P<stage>\d+)\.(?P<rest>.+)$")
_REST_RE = re.compile(r"^(blocks\.(?P<block>\d+)\.(?P<blayer>.+)|downsample\.(?P<dlayer>.+))$")


@dataclass
class AdaptationReport:
    entries: OrderedDict = field(default_factory=OrderedDict)

    def record(self, name, provenance, source=None, region=None):
        if name in self.entries:
            raise AdaptationError(f"{name} recorded twice")
        self.entries[name] = {"provenance": provenance, "source": source, "slice": region}

    def counts(self):
        per = {}
        for name, e in self.entries.items():
            st = _STAGE_RE.match(name)
            key = f"stage{int(st['stage']) + 1}" if st else "other"
            per.setdefault(key, Counter())[e["provenance"]] += 1
        return {k: dict(v) for k, v in per.items()}

    def to_dict(self):
        return {"parameters": dict(self.entries), "counts": self.counts()}


def _parse_source(source):
    table, stages = {}, set()
    for name in source:
        m = _STAGE_RE.match(name)
        if not m:
            continue
        rm = _REST_RE.match(m["rest"])
        if not rm:
            raise AdaptationError(f"cannot parse source tensor name {name!r}")
        stage = int(m["stage"])
        stages.add(stage)
        table[(stage, m["rest"])] = name
    if not stages or len(stages) < 4 or sorted(stages)[:4] != [0, 1, 2, 3]:
        raise AdaptationError(f"source needs at least 4 stages named stages.0..3, found {sorted(stages)}")
    return table


def adapt(source, target_spec, rng):
    """Initialise a ``target_spec`` backbone from a pretrained staged archive.

    Stage view: target stages 1-4 take the source stage of the same index,
    block i from source block i; surplus target blocks and every later stage
    stay randomly initialised. Micro view: for each mapped tensor the leading
    slice along every axis (min of the two extents) is copied.
    """
    table = _parse_source(source)
    backbone = init_backbone(Backbone(target_spec), rng)
    report = AdaptationReport()
    for name, p in backbone.named_parameters():
        m = _STAGE_RE.match(name)
        stage = int(m["stage"])
        src_name = table.get((stage, m["rest"])) if stage < 4 else None
        if src_name is None:
            report.record(name, "random_init")
            continue
        src = source[src_name]
        if src.shape == p.shape:
            p.data = src.astype(p.data.dtype, copy=True)
            report.record(name, "copied_full", src_name)
        elif src.ndim == p.ndim:
            region = tuple(slice(0, min(a, b)) for a, b in zip(src.shape, p.shape))
            p.data[region] = src[region]
            report.record(name, "copied_slice", src_name, [[0, s.stop] for s in region])
        else:
            report.record(name, "random_init", src_name)
    return save(backbone), report
