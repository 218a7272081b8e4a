"""Detection metrics: rotated IoU, greedy matching, R40 AP, depth breakdown."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CLASS_NAMES, NUM_CLASSES, LabeledBox, Pose6DoF

METRICS = ("ap_bev_primary", "ap_bev_loose", "ap_3d_primary", "ap_3d_loose", "distance_map")


@dataclass(frozen=True)
class EvalConfig:
    iou_primary: tuple = (0.7, 0.5, 0.5)
    iou_loose: tuple = (0.5, 0.25, 0.25)
    depth_bins: tuple = ((0.0, 30.0), (30.0, 50.0), (50.0, 80.0), (0.0, 80.0))
    distance_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    frontal_only: bool = False
    recall_positions: int = 40

    def __post_init__(self):
        for t in tuple(self.iou_primary) + tuple(self.iou_loose):
            if not 0 < t <= 1:
                raise ValueError("IoU thresholds must lie in (0, 1]")
        for lo, hi in self.depth_bins:
            if not lo < hi:
                raise ValueError("depth bins must have lo < hi")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")

    @property
    def bin_names(self) -> tuple:
        return tuple(f"{lo:g}-{hi:g}" for lo, hi in self.depth_bins)


# --- geometry ---------------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area (positive for counter-clockwise vertices)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a: LabeledBox, b: LabeledBox) -> float:
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    return max(polygon_area(clip_polygon(a.bev_corners(), b.bev_corners())), 0.0)


def bev_iou(a: LabeledBox, b: LabeledBox) -> float:
    aa = a.size[0] * a.size[1]
    ab = b.size[0] * b.size[1]
    if aa <= 0 or ab <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = aa + ab - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a: LabeledBox, b: LabeledBox) -> float:
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    if dz <= 0 or va <= 0 or vb <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = va + vb - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def center_distance(a: LabeledBox, b: LabeledBox) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


# --- matching ---------------------------------------------------------------------


@dataclass(frozen=True)
class Criterion:
    kind: str  # "bev", "3d" or "distance"
    threshold: float

    def __post_init__(self):
        if self.kind not in ("bev", "3d", "distance"):
            raise ValueError(f"unknown matching criterion {self.kind!r}")

    def score(self, det, gt) -> float:
        """Higher is better; returns -inf when the pair does not qualify."""
        if self.kind == "distance":
            d = center_distance(det, gt)
            return -d if d <= self.threshold else -math.inf
        v = bev_iou(det, gt) if self.kind == "bev" else iou_3d(det, gt)
        return v if v >= self.threshold else -math.inf


def _frontal(boxes, pose: Optional[Pose6DoF]):
    if pose is None:
        raise ValueError("frontal_only needs the scene's sensor pose")
    inv = pose.inverse()
    return [b for b in boxes if inv.apply(np.asarray(b.center)[None])[0, 0] > 0]


def match_detections(dets, gts, criterion: Criterion, frontal_only: bool = False, pose: Optional[Pose6DoF] = None):
    """Greedy one-to-one matching in descending confidence order.

    Returns (dets in match order, tp flags, gt index matched per det or -1, gts, gt matched flags).
    Ties in confidence keep the input order.
    """
    dets, gts = list(dets), list(gts)
    if frontal_only:
        dets, gts = _frontal(dets, pose), _frontal(gts, pose)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    dets = [dets[i] for i in order]
    gt_used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    which = np.full(len(dets), -1, dtype=np.int64)
    for i, d in enumerate(dets):
        best, best_j = -math.inf, -1
        for j, g in enumerate(gts):
            if gt_used[j]:
                continue
            s = criterion.score(d, g)
            if s > best:
                best, best_j = s, j
        if best_j >= 0:
            gt_used[best_j] = True
            tp[i] = True
            which[i] = best_j
    return dets, tp, which, gts, gt_used


# --- average precision --------------------------------------------------------------


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    confidence: np.ndarray
    tp: np.ndarray


def pr_curve(confidences, tp, n_gt: int) -> PRCurve:
    conf = np.asarray(confidences, dtype=np.float64)
    flags = np.asarray(tp, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    conf, flags = conf[order], flags[order]
    ctp = np.cumsum(flags)
    k = np.arange(1, len(flags) + 1)
    recall = ctp / n_gt if n_gt > 0 else np.zeros(len(flags))
    precision = ctp / k if len(k) else np.zeros(0)
    return PRCurve(recall, precision, conf, flags)


def average_precision(tp, n_gt: int, confidences=None, recall_positions: int = 40) -> float:
    """R40 AP of a confidence-ordered tp/fp sequence; NaN when there is no ground truth."""
    if n_gt < 0:
        raise ValueError("gt count must be >= 0")
    if n_gt == 0:
        return math.nan
    flags = np.asarray(tp, dtype=bool)
    conf = -np.arange(len(flags), dtype=np.float64) if confidences is None else confidences
    curve = pr_curve(conf, flags, n_gt)
    if len(flags) == 0:
        return 0.0
    # right envelope: best precision at any recall >= r
    env = np.maximum.accumulate(curve.precision[::-1])[::-1]
    positions = np.arange(1, recall_positions + 1) / recall_positions
    idx = np.searchsorted(curve.recall, positions - 1e-12, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


# --- reports ------------------------------------------------------------------------


def _sensor_range(box: LabeledBox, pose: Optional[Pose6DoF]) -> float:
    c = np.asarray(box.center, dtype=np.float64)
    if pose is not None:
        c = pose.inverse().apply(c[None])[0]
    return math.hypot(c[0], c[1])


def _collect(dets, gts, poses, cls, criterion, config):
    """Dataset-level (confidence, tp, range) for dets and ranges for gts of one class."""
    rows, gt_ranges = [], []
    for sid in sorted(gts):
        pose = poses.get(sid) if poses else None
        d = [b for b in dets.get(sid, []) if b.cls == cls]
        g = [b for b in gts[sid] if b.cls == cls]
        md, tp, which, mg, _ = match_detections(d, g, criterion, config.frontal_only, pose)
        g_rng = [_sensor_range(b, pose) for b in mg]
        gt_ranges.extend(g_rng)
        for b, t, j in zip(md, tp, which):
            rows.append((b.confidence, bool(t), g_rng[j] if t else _sensor_range(b, pose)))
    return rows, np.asarray(gt_ranges)


def _binned_ap(rows, gt_ranges, lo, hi, positions):
    n_gt = int(np.count_nonzero((gt_ranges >= lo) & (gt_ranges < hi)))
    sel = [(c, t) for c, t, r in rows if lo <= r < hi]
    if n_gt == 0:
        return math.nan, 0
    conf = np.array([c for c, _ in sel], dtype=np.float64)
    flags = np.array([t for _, t in sel], dtype=bool)
    return average_precision(flags, n_gt, conf, positions), n_gt


def metric_report(dets: dict, gts: dict, poses: Optional[dict] = None, config: EvalConfig = EvalConfig()) -> dict:
    """class -> depth bin -> metric. Undefined cells (no ground truth) are None.

    ``dets`` and ``gts`` map scene id to world-frame boxes; ``poses`` maps scene
    id to the sensor pose used for depth binning.
    """
    report = {}
    for cls in range(NUM_CLASSES):
        crits = {
            "ap_bev_primary": [Criterion("bev", config.iou_primary[cls])],
            "ap_bev_loose": [Criterion("bev", config.iou_loose[cls])],
            "ap_3d_primary": [Criterion("3d", config.iou_primary[cls])],
            "ap_3d_loose": [Criterion("3d", config.iou_loose[cls])],
            "distance_map": [Criterion("distance", t) for t in config.distance_thresholds],
        }
        collected = {m: [_collect(dets, gts, poses, cls, c, config) for c in cs] for m, cs in crits.items()}
        table = {}
        for (lo, hi), name in zip(config.depth_bins, config.bin_names):
            cell = {}
            n_gt = 0
            for m, runs in collected.items():
                aps = []
                for rows, gr in runs:
                    ap, n_gt = _binned_ap(rows, gr, lo, hi, config.recall_positions)
                    aps.append(ap)
                v = float(np.mean(aps)) if aps and not any(math.isnan(a) for a in aps) else None
                cell[m] = v
            cell["num_gt"] = n_gt
            table[name] = cell
        report[CLASS_NAMES[cls]] = table
    return report


def headline(report: dict, cls: str = "Car", metric: str = "ap_bev_loose", bin_name: str = "0-80") -> float:
    v = report[cls][bin_name][metric]
    return math.nan if v is None else float(v)


def write_metrics(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def pr_curves(dets: dict, gts: dict, poses: Optional[dict] = None, config: EvalConfig = EvalConfig(),
              loose: bool = False) -> dict:
    """Per-class PR curve over the full range at the primary (or loose) BEV threshold."""
    out = {}
    for cls in range(NUM_CLASSES):
        thr = (config.iou_loose if loose else config.iou_primary)[cls]
        rows, gr = _collect(dets, gts, poses, cls, Criterion("bev", thr), config)
        out[CLASS_NAMES[cls]] = pr_curve([r[0] for r in rows], [r[1] for r in rows], len(gr))
    return out


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["confidence", "precision", "recall"])
        for c, p, r in zip(curve.confidence, curve.precision, curve.recall):
            w.writerow([f"{c:.6f}", f"{p:.6f}", f"{r:.6f}"])
