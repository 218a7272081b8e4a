"""Iterative self-training on an unlabelled target split.

Each round: detect on every target scene, filter the detections into
pseudo-labels (FB-F per scene, then PO-F over the split), turn boxes into
per-point labels, optionally rewrite them with PP-score evidence (FB-S),
and fine-tune stage 1. Switching all three off gives vanilla self-training.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import CLASS_NAMES, NUM_CLASSES, Scene
from .detector import DetectorConfig, DetectorModel, detect, scene_features, stage1_train
from .evaluation import METRICS, EvalConfig, metric_report
from .ppscore import PPConfig, score_scene
from .refine import FilterConfig, refine_pseudo_labels
from .supervise import FBSConfig, FocalConfig, fbs_rewrite, labels_from_boxes
from .parallel import pmap


@dataclass(frozen=True)
class AdaptationConfig:
    rounds: int = 10
    enable_pof: bool = True
    enable_fbf: bool = True
    enable_fbs: bool = True
    filter: FilterConfig = FilterConfig()
    fbs: FBSConfig = FBSConfig()
    focal: FocalConfig = FocalConfig()
    detector: DetectorConfig = DetectorConfig()
    pp: PPConfig = PPConfig()
    # take PO-F source statistics from the model file when it carries them
    source_stats_from_model: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @property
    def variant(self) -> str:
        return "".join(["P" if self.enable_pof else "-", "F" if self.enable_fbf else "-", "S" if self.enable_fbs else "-"])

    def to_json(self) -> dict:
        return asdict(self)


_NESTED = {"filter": FilterConfig, "fbs": FBSConfig, "focal": FocalConfig, "detector": DetectorConfig, "pp": PPConfig}


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def config_from_dict(d: dict) -> AdaptationConfig:
    if not isinstance(d, dict):
        raise ValueError("adaptation config must be a JSON object")
    names = {f.name for f in fields(AdaptationConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown adaptation config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if k in _NESTED:
            if not isinstance(v, dict):
                raise ValueError(f"config key {k!r} must be an object")
            sub = _NESTED[k]
            bad = set(v) - {f.name for f in fields(sub)}
            if bad:
                raise ValueError(f"unknown keys in {k!r}: {sorted(bad)}")
            kwargs[k] = sub(**{kk: _tuplify(vv) for kk, vv in v.items()})
        else:
            kwargs[k] = v
    return AdaptationConfig(**kwargs)


def load_config(path) -> AdaptationConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e
    return config_from_dict(d)


@dataclass
class RoundLog:
    round: int
    pseudo_counts: tuple = (0,) * NUM_CLASSES
    filter_summary: dict = field(default_factory=dict)
    loss: float = math.nan
    metrics: Optional[dict] = None


class SceneCache:
    """Per-scene features and PP-scores, each computed once."""

    def __init__(self, stores: Optional[dict], pp: PPConfig, detector: DetectorConfig):
        self.stores = stores
        self.pp = pp
        self.detector = detector
        self._features = {}
        self._pp = {}
        self.pp_computations = 0
        self.feature_computations = 0

    def features(self, scene: Scene):
        if scene.scene_id not in self._features:
            self._features[scene.scene_id] = scene_features(scene, self.detector)
            self.feature_computations += 1
        return self._features[scene.scene_id]

    def pp_field(self, scene: Scene):
        if scene.scene_id not in self._pp:
            if self.stores is None:
                raise ValueError("PP-scores requested but no traversal stores were given")
            self._pp[scene.scene_id] = score_scene(scene, self.stores, self.pp, threads=1)
            self.pp_computations += 1
        return self._pp[scene.scene_id]


def evaluate_round(model: DetectorModel, scenes, config: EvalConfig = EvalConfig(),
                   detector: DetectorConfig = DetectorConfig(), cache: Optional[SceneCache] = None,
                   threads=None) -> dict:
    scenes = list(scenes)
    for s in scenes:
        if s.gt_boxes is None:
            raise ValueError(f"evaluation scene {s.scene_id!r} has no labels")
    feats = [cache.features(s) for s in scenes] if cache is not None else [None] * len(scenes)
    dets = pmap(lambda a: detect(model, a[0], detector, a[1]), list(zip(scenes, feats)), threads)
    return metric_report(
        {s.scene_id: d for s, d in zip(scenes, dets)},
        {s.scene_id: list(s.gt_boxes) for s in scenes},
        {s.scene_id: s.sensor_pose for s in scenes},
        config,
    )


def _filter_config(model: DetectorModel, config: AdaptationConfig) -> FilterConfig:
    stats = model.source_stats
    if config.source_stats_from_model and stats:
        return replace(config.filter, source_class_counts=tuple(stats["class_counts"]),
                       source_scene_count=int(stats["scene_count"]))
    return config.filter


def run_adaptation(model: DetectorModel, target_scenes, stores: Optional[dict], config: AdaptationConfig = AdaptationConfig(),
                   eval_scenes=None, eval_config: EvalConfig = EvalConfig(), threads=None,
                   cache: Optional[SceneCache] = None, eval_cache: Optional[SceneCache] = None,
                   on_round: Optional[Callable] = None):
    """Adapt ``model`` to the target split; returns (final model, [RoundLog]).

    Round 0 in the log is the unadapted model. Target labels are stripped on
    entry, so the loop cannot read them.
    """
    targets = [s.without_labels() for s in target_scenes]
    if not targets:
        raise ValueError("no target scenes")
    det_cfg = config.detector
    cache = cache or SceneCache(stores, config.pp, det_cfg)
    eval_scenes = list(eval_scenes) if eval_scenes is not None else None
    eval_cache = eval_cache or SceneCache(None, config.pp, det_cfg)
    fcfg = _filter_config(model, config)
    need_pp = config.enable_fbf or config.enable_fbs

    feats = pmap(cache.features, targets, threads)
    world = {s.scene_id: s.world_cloud().points for s in targets}
    X = np.concatenate([f.matrix(det_cfg) for f in feats])
    taus = {}
    if need_pp:
        fields_ = pmap(cache.pp_field, targets, threads)
        taus = {s.scene_id: f.tau for s, f in zip(targets, fields_)}

    def log_eval(k, m, loss=math.nan, counts=(0,) * NUM_CLASSES, summary=None):
        metrics = evaluate_round(m, eval_scenes, eval_config, det_cfg, eval_cache, threads) if eval_scenes else None
        entry = RoundLog(k, tuple(counts), summary or {}, loss, metrics)
        if on_round is not None:
            on_round(entry, m)
        return entry

    logs = [log_eval(0, model)]
    for k in range(1, config.rounds + 1):
        dets = pmap(lambda a: detect(model, a[0], det_cfg, a[1]), list(zip(targets, feats)), threads)
        detections = {s.scene_id: d for s, d in zip(targets, dets)}
        pseudo, report = refine_pseudo_labels(
            detections, world, taus if config.enable_fbf else {s: np.zeros(len(world[s])) for s in world},
            fcfg, len(targets), enable_fbf=config.enable_fbf, enable_pof=config.enable_pof,
        )
        Ys = []
        for s in targets:
            y = labels_from_boxes(world[s.scene_id], pseudo[s.scene_id])
            if config.enable_fbs:
                y = fbs_rewrite(y, taus[s.scene_id], config.fbs)
            Ys.append(y.labels)
        Y = np.concatenate(Ys)
        model, losses = stage1_train(model, X, Y, config.focal, det_cfg.epochs_per_round, det_cfg.learning_rate)
        counts = [0] * NUM_CLASSES
        for boxes in pseudo.values():
            for b in boxes:
                counts[b.cls] += 1
        logs.append(log_eval(k, model, float(np.mean(losses)) if losses else math.nan, counts, report.summary()))
    return model, logs


ROUNDS_HEADER = ("round", "class", "depth_bin") + METRICS


def rounds_rows(logs) -> list:
    rows = []
    for log in logs:
        if log.metrics is None:
            continue
        for cls in CLASS_NAMES:
            for bin_name, cell in log.metrics[cls].items():
                vals = ["nan" if cell[m] is None else f"{cell[m]:.6f}" for m in METRICS]
                rows.append([str(log.round), cls, bin_name] + vals)
    return rows


def write_rounds_csv(path, logs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROUNDS_HEADER)
        w.writerows(rounds_rows(logs))


def read_rounds_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows and set(ROUNDS_HEADER) - set(rows[0]):
        raise ValueError(f"{path}: missing columns {sorted(set(ROUNDS_HEADER) - set(rows[0]))}")
    return rows
