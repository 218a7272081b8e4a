"""Pseudo-label quality control.

Two filters act on raw detections from the target split:

* foreground/background filtering (FB-F) drops a box when a low percentile
  of the PP-scores of the points inside it is still high, i.e. the box sits
  on persistent background;
* posterior filtering (PO-F) keeps, per class, only the most confident
  boxes up to a cap derived from the source domain's object frequency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import CLASS_NAMES, NUM_CLASSES, Provenance, points_in_box

KITTI_CLASS_COUNTS = (14357, 2207, 734)
KITTI_SCENE_COUNT = 3712

KEPT = "kept"
FBF = "fbf"
POF = "pof"
EMPTY = "empty_box"


@dataclass(frozen=True)
class FilterConfig:
    alpha_fbf: float = 20.0
    gamma_fbf: float = 0.5
    beta: float = 0.333
    source_class_counts: tuple = KITTI_CLASS_COUNTS
    source_scene_count: int = KITTI_SCENE_COUNT
    min_points_fbf: int = 1
    fbf_before_pof: bool = True
    pof_scope: str = "split"  # or "scene"

    def __post_init__(self):
        if not 0 < self.alpha_fbf < 100:
            raise ValueError("alpha_fbf must lie in (0, 100)")
        if not 0 <= self.gamma_fbf <= 1:
            raise ValueError("gamma_fbf must lie in [0, 1]")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if len(self.source_class_counts) != NUM_CLASSES:
            raise ValueError(f"source_class_counts needs {NUM_CLASSES} entries")
        if self.source_scene_count < 1:
            raise ValueError("source_scene_count must be >= 1")
        if self.pof_scope not in ("split", "scene"):
            raise ValueError("pof_scope must be 'split' or 'scene'")
        object.__setattr__(self, "source_class_counts", tuple(int(c) for c in self.source_class_counts))


@dataclass
class FilterReport:
    """Fate of every input box: (scene_id, box_index, class, confidence, reason)."""

    entries: list = field(default_factory=list)

    def add(self, scene_id, index, box, reason):
        self.entries.append((scene_id, index, box.cls, box.confidence, reason))

    def per_class(self) -> dict:
        out = {name: {"input": 0, KEPT: 0, FBF: 0, POF: 0, EMPTY: 0} for name in CLASS_NAMES}
        for _, _, cls, _, reason in self.entries:
            row = out[CLASS_NAMES[cls]]
            row["input"] += 1
            row[reason] += 1
        return out

    def summary(self) -> dict:
        return {name: (row[KEPT], row["input"]) for name, row in self.per_class().items()}

    def to_json(self) -> dict:
        entries = sorted(self.entries, key=lambda e: (e[0], e[1]))
        return {
            "boxes": [
                {"scene": s, "index": i, "class": CLASS_NAMES[c], "score": conf, "kept": r == KEPT, "reason": r}
                for s, i, c, conf, r in entries
            ],
            "per_class": self.per_class(),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def percentile_nearest_rank(values, alpha: float) -> float:
    """Nearest-rank percentile: the ceil(alpha/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = len(v)
    if n == 0:
        raise ValueError("percentile of an empty list")
    # exact rational arithmetic: 0.2 * 100 in floats is 20.000000000000004
    rank = math.ceil(Fraction(alpha) * n / 100)
    return float(v[min(max(rank - 1, 0), n - 1)])


def fbf_decision(tau_in_box: np.ndarray, config: FilterConfig) -> str:
    if len(tau_in_box) < config.min_points_fbf or len(tau_in_box) == 0:
        return EMPTY
    return FBF if percentile_nearest_rank(tau_in_box, config.alpha_fbf) > config.gamma_fbf else KEPT


def fbf_filter(boxes, points: np.ndarray, tau: np.ndarray, config: FilterConfig = FilterConfig(),
               scene_id: str = "", report: FilterReport | None = None):
    """Drop boxes whose contained points are mostly persistent.

    ``points`` are in the boxes' frame and aligned with ``tau``.
    Returns (kept boxes, report).
    """
    tau = np.asarray(tau, dtype=np.float64)
    if len(tau) != len(points):
        raise ValueError("PP-scores are not aligned with the cloud")
    report = FilterReport() if report is None else report
    kept = []
    for i, b in enumerate(boxes):
        reason = fbf_decision(tau[points_in_box(b, points)], config)
        if reason == KEPT:
            kept.append(b)
        else:
            report.add(scene_id, i, b, reason)
    return kept, report


def pof_cap(cls: int, config: FilterConfig, target_scene_count: int) -> int:
    """floor(beta * N_c^S / N_scenes^S * N_scenes^T)."""
    if target_scene_count < 1:
        raise ValueError("target_scene_count must be >= 1")
    return math.floor(
        Fraction(config.beta) * config.source_class_counts[cls] * target_scene_count / config.source_scene_count
    )


def _confidence_order(candidates):
    # candidates: (scene_id, box_index, box)
    return sorted(candidates, key=lambda c: (-c[2].confidence, c[0], c[1]))


def pof_filter(candidates, config: FilterConfig, target_scene_count: int, report: FilterReport | None = None):
    """Keep the top-``pof_cap`` boxes per class by confidence.

    ``candidates`` is an iterable of (scene_id, box_index, box); ties in
    confidence go to the smaller scene id, then the smaller box index.
    """
    report = FilterReport() if report is None else report
    candidates = list(candidates)
    kept = []
    if config.pof_scope == "split":
        groups = {None: candidates}
        caps = {c: pof_cap(c, config, target_scene_count) for c in range(NUM_CLASSES)}
    else:
        groups = {}
        for cand in candidates:
            groups.setdefault(cand[0], []).append(cand)
        caps = {c: pof_cap(c, config, 1) for c in range(NUM_CLASSES)}
    for _, group in sorted(groups.items(), key=lambda kv: (kv[0] is not None, kv[0] or "")):
        for cls in range(NUM_CLASSES):
            ranked = _confidence_order([c for c in group if c[2].cls == cls])
            kept.extend(ranked[: caps[cls]])
            for s, i, b in ranked[caps[cls]:]:
                report.add(s, i, b, POF)
    kept.sort(key=lambda c: (c[0], c[1]))
    return kept, report


def refine_pseudo_labels(detections: dict, points: dict, taus: dict, config: FilterConfig = FilterConfig(),
                         target_scene_count: int | None = None, enable_fbf: bool = True, enable_pof: bool = True):
    """Apply FB-F per scene and PO-F over the whole split.

    ``detections``, ``points`` and ``taus`` are keyed by scene id; boxes and
    points share a frame. Returns ({scene_id: [pseudo boxes]}, FilterReport).
    Disabled filters pass boxes through unchanged.
    """
    report = FilterReport()
    n_target = len(detections) if target_scene_count is None else target_scene_count
    scene_ids = sorted(detections)
    # track boxes by their index in the raw detection list so the report stays stable
    survivors = {sid: list(enumerate(detections[sid])) for sid in scene_ids}

    def run_fbf():
        for sid in scene_ids:
            pts = points[sid]
            tau = np.asarray(taus[sid], dtype=np.float64)
            if len(tau) != len(pts):
                raise ValueError(f"scene {sid!r}: PP-scores not aligned with the cloud")
            keep = []
            for i, b in survivors[sid]:
                reason = fbf_decision(tau[points_in_box(b, pts)], config)
                if reason == KEPT:
                    keep.append((i, b))
                else:
                    report.add(sid, i, b, reason)
            survivors[sid] = keep

    def run_pof():
        cands = [(sid, i, b) for sid in scene_ids for i, b in survivors[sid]]
        kept, _ = pof_filter(cands, config, n_target, report)
        for sid in scene_ids:
            survivors[sid] = []
        for sid, i, b in kept:
            survivors[sid].append((i, b))

    stages = []
    if enable_fbf:
        stages.append(run_fbf)
    if enable_pof:
        stages.insert(0 if not config.fbf_before_pof else len(stages), run_pof)
    for stage in stages:
        stage()

    out = {}
    for sid in scene_ids:
        out[sid] = []
        for i, b in survivors[sid]:
            report.add(sid, i, b, KEPT)
            out[sid].append(b.with_provenance(Provenance.PSEUDO_LABEL))
    return out, report
