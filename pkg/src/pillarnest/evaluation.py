"""Center-distance average precision with translation and orientation errors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
N_RECALL = 101


def center_distance(a, b):
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def yaw_difference(a, b, period=math.pi):
    """Absolute yaw difference folded into [0, period/2]."""
    d = (a - b + period / 2) % period - period / 2
    return abs(d)


def score_order(boxes):
    """Indices by descending score; equal scores keep their input order."""
    return sorted(range(len(boxes)), key=lambda i: -boxes[i].score)


class _Key(tuple):
    """Cost vector added componentwise and compared lexicographically."""

    def __add__(self, other):
        return _Key(a + b for a, b in zip(self, other))

    def __sub__(self, other):
        return _Key(a - b for a, b in zip(self, other))


def _min_cost_rows(n_rows, n_cols, cost):
    """Exact min-cost assignment of every row to a distinct column.

    ``cost(i, j)`` returns a ``_Key`` or None for a forbidden pair. Shortest
    augmenting paths with potentials; needs only +, - and < on the costs.
    """
    zero = cost.zero
    u, v = [zero] * (n_rows + 1), [zero] * (n_cols + 1)
    owner, way = [0] * (n_cols + 1), [0] * (n_cols + 1)
    for i in range(1, n_rows + 1):
        owner[0], j0 = i, 0
        minv, used = [None] * (n_cols + 1), [False] * (n_cols + 1)
        while True:
            used[j0] = True
            i0, delta, j1 = owner[j0], None, 0
            for j in range(1, n_cols + 1):
                if used[j]:
                    continue
                c = cost(i0 - 1, j - 1)
                if c is not None:
                    cur = c - u[i0] - v[j]
                    if minv[j] is None or cur < minv[j]:
                        minv[j], way[j] = cur, j0
                if minv[j] is not None and (delta is None or minv[j] < delta):
                    delta, j1 = minv[j], j
            for j in range(n_cols + 1):
                if used[j]:
                    u[owner[j]] = u[owner[j]] + delta
                    v[j] = v[j] - delta
                elif minv[j] is not None:
                    minv[j] = minv[j] - delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return {owner[j] - 1: j - 1 for j in range(1, n_cols + 1) if owner[j]}


def match(preds, gts, dist_threshold):
    """Optimal one-to-one matching of predictions to same-class ground truth.

    A pair is admissible when the BEV centers lie strictly closer than
    ``dist_threshold``. Among all one-to-one matchings of admissible pairs the
    result maximises the number of matches, then the total matched score,
    then prefers a smaller sum of score ranks (earlier predictions win ties),
    then a smaller total center distance. Remaining ties go to the
    lexicographically smallest choice vector, read in prediction order with
    "unmatched" before gt 0 before gt 1. All comparisons are exact.
    Returns the matched gt index (or None) per prediction.
    """
    n, m = len(preds), len(gts)
    out = [None] * n
    edges = {}
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if g.class_id == p.class_id:
                d = center_distance(p, g)
                if d < dist_threshold:
                    edges[i, j] = d
    if not edges:
        return out
    rank = [0] * n
    for r, i in enumerate(score_order(preds)):
        rank[i] = r
    base = m + 2

    # connected components of the admissible graph are solved independently
    parent = list(range(n + m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        parent[find(i)] = find(n + j)
    groups = {}
    for i, j in edges:
        groups.setdefault(find(i), set()).add(i)
    for rows in groups.values():
        rows = sorted(rows)
        cols = sorted({j for (i, j) in edges if i in rows})

        def cost(a, b, rows=rows, cols=cols):
            i = rows[a]
            if b >= len(cols):  # one "unmatched" column per row
                return cost.zero if b - len(cols) == a else None
            j = cols[b]
            d = edges.get((i, j))
            if d is None:
                return None
            return _Key((-1, -Fraction(preds[i].score), rank[i], Fraction(d), (j + 1) * base ** (n - 1 - i)))

        cost.zero = _Key((0, 0, 0, 0, 0))
        for a, b in _min_cost_rows(len(rows), len(cols) + len(rows), cost).items():
            if b < len(cols):
                out[rows[a]] = cols[b]
    return out


def average_precision(tp_flags, n_gt):
    """AP of a score-sorted TP/FP sequence over ``n_gt`` ground truths.

    Precision is sampled at 101 recall points by linear interpolation
    (zero beyond the highest reached recall), the region with recall or
    precision below 0.1 is discarded, and the result is rescaled to [0, 1].
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp_flags = np.asarray(tp_flags, dtype=float)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    prec = tp / (tp + fp)
    rec = tp / float(n_gt)
    # k / 100 rounds like tp / n_gt, so reached recall levels compare equal
    grid = np.arange(N_RECALL) / (N_RECALL - 1)
    prec = np.interp(grid, rec, prec, right=0)
    prec = prec[round(100 * MIN_RECALL) + 1:] - MIN_PRECISION
    prec[prec < 0] = 0.0
    return min(float(np.mean(prec)) / (1.0 - MIN_PRECISION), 1.0)


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)  # class -> {threshold: ap}
    mAP: float = 0.0
    mATE: float = float("nan")
    mAOE: float = float("nan")
    thresholds: tuple = DIST_THRESHOLDS

    def to_dict(self):
        def num(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {"ap": {str(c): {str(t): v for t, v in d.items()} for c, d in self.ap.items()},
                "mAP": self.mAP, "mATE": num(self.mATE), "mAOE": num(self.mAOE),
                "thresholds": list(self.thresholds)}


def _accumulate(pred_scenes, gt_scenes, cls, threshold):
    """Global score-sorted TP flags for one class, plus TP errors."""
    entries = []
    for si, sid in enumerate(gt_scenes):
        preds = [b for b in pred_scenes.get(sid, []) if b.class_id == cls]
        gts = [b for b in gt_scenes[sid] if b.class_id == cls]
        m = match(preds, gts, threshold)
        for k, (p, j) in enumerate(zip(preds, m)):
            entries.append((-p.score, si, k, j is not None,
                            None if j is None else (center_distance(p, gts[j]), yaw_difference(p.yaw, gts[j].yaw))))
    entries.sort(key=lambda e: e[:3])
    flags = [e[3] for e in entries]
    errs = [e[4] for e in entries if e[4] is not None]
    return flags, errs


def evaluate(pred_scenes, gt_scenes, thresholds=DIST_THRESHOLDS, classes=None):
    """Aggregate AP over scenes; inputs map scene id -> list of boxes."""
    n_gt_total = sum(len(v) for v in gt_scenes.values())
    if not gt_scenes or n_gt_total == 0:
        raise ValueError("evaluation needs at least one ground-truth box")
    unknown = sorted(set(pred_scenes) - set(gt_scenes))
    if unknown:
        raise ValueError(f"predictions for unknown scene {unknown[0]!r}")
    for sid, boxes in pred_scenes.items():
        if any(b.score is None for b in boxes):
            raise ValueError(f"scene {sid!r} has a prediction without a score")
    if classes is None:
        classes = sorted({b.class_id for v in gt_scenes.values() for b in v})
    result = EvalResult(thresholds=tuple(thresholds))
    ates, aoes, aps = [], [], []
    for cls in classes:
        n_gt = sum(1 for v in gt_scenes.values() for b in v if b.class_id == cls)
        if n_gt == 0:
            continue
        result.ap[cls] = {}
        for t in thresholds:
            flags, errs = _accumulate(pred_scenes, gt_scenes, cls, t)
            ap = average_precision(flags, n_gt)
            result.ap[cls][t] = ap
            aps.append(ap)
        _, errs = _accumulate(pred_scenes, gt_scenes, cls, TP_THRESHOLD)
        if errs:
            ates.append(float(np.mean([e[0] for e in errs])))
            aoes.append(float(np.mean([e[1] for e in errs])))
    result.mAP = float(np.mean(aps))
    result.mATE = float(np.mean(ates)) if ates else float("nan")
    result.mAOE = float(np.mean(aoes)) if aoes else float("nan")
    return result
