"""Two-stage point-based detector.

Stage 1 is a per-point, per-class logistic model over a handful of
geometric features. Stage 2 thresholds the foreground probability,
clusters foreground points by single linkage and fits an oriented box to
each cluster, blending the fitted size with a per-class size prior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from scipy.optimize import minimize

from .core import CLASS_NAMES, NUM_CLASSES, LabeledBox, Provenance, Scene
from .parallel import pmap
from .spatial import VoxelIndex
from .supervise import EPS, FocalConfig, focal_loss, labels_from_boxes, sigmoid

N_FEATURES = 5
FEATURE_NAMES = ("height", "density", "range", "extent", "bias")

DEFAULT_SIZE_PRIORS = ((4.0, 1.8, 1.1), (0.7, 0.7, 1.25), (1.7, 0.6, 1.2))


@dataclass(frozen=True)
class DetectorConfig:
    ground_cell: float = 2.0  # xy cell for the local ground estimate
    density_radius: float = 0.6
    column_radius: float = 0.6
    height_saturation: float = 0.5
    extent_cap: float = 8.0
    fg_threshold: float = 0.5
    cluster_radius: float = 0.7
    min_cluster_points: int = 5
    prior_blend: float = 0.5
    min_box_size: float = 0.1
    learning_rate: float = 1.5e-3
    epochs_per_round: int = 10

    def __post_init__(self):
        if not 0 <= self.fg_threshold < 1:
            raise ValueError("fg_threshold must lie in [0, 1)")
        if not 0 <= self.prior_blend <= 1:
            raise ValueError("prior_blend must lie in [0, 1]")
        if self.cluster_radius <= 0 or self.min_cluster_points < 1:
            raise ValueError("cluster_radius must be > 0 and min_cluster_points >= 1")
        if self.learning_rate <= 0 or self.epochs_per_round < 0:
            raise ValueError("learning_rate must be > 0 and epochs_per_round >= 0")


@dataclass(frozen=True)
class PointFeatures:
    """Raw per-point geometry; ``matrix`` builds the model inputs."""

    height: np.ndarray  # above the lowest point of the xy ground cell
    density: np.ndarray  # neighbours within density_radius, self included
    range: np.ndarray  # horizontal distance to the sensor
    extent: np.ndarray  # z span of the vertical column through the point

    def __len__(self):
        return len(self.height)

    def matrix(self, config: DetectorConfig = DetectorConfig()) -> np.ndarray:
        n = len(self)
        return np.column_stack(
            [
                np.minimum(self.height, config.height_saturation) / config.height_saturation,
                np.log1p(self.density) / 5.0,
                self.range / 50.0,
                np.minimum(self.extent, config.extent_cap) / 4.0,
                np.ones(n),
            ]
        )


def _ground_level(points: np.ndarray, cell: float) -> np.ndarray:
    """Lowest z over the point's xy cell and its 8 neighbours."""
    keys = np.floor(points[:, :2] / cell).astype(np.int64)
    keys -= keys.min(axis=0) - 1
    width = int(keys[:, 1].max()) + 2
    packed = keys[:, 0] * width + keys[:, 1]
    uniq, inv = np.unique(packed, return_inverse=True)
    inv = inv.reshape(-1)
    zmin = np.full(len(uniq), np.inf)
    np.minimum.at(zmin, inv, points[:, 2])
    # dilate the per-cell minimum over the 3x3 block
    block = zmin.copy()
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            target = uniq + dx * width + dy
            pos = np.minimum(np.searchsorted(uniq, target), len(uniq) - 1)
            has = uniq[pos] == target
            block[has] = np.minimum(block[has], zmin[pos[has]])
    return block[inv]


def compute_features(points: np.ndarray, sensor_xyz=None, config: DetectorConfig = DetectorConfig()) -> PointFeatures:
    """Features for world-frame points (z up).

    ``extent`` is the top of the point's vertical column (xy radius
    ``column_radius``) above the local ground level.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        z = np.zeros(0)
        return PointFeatures(z, z.copy(), z.copy(), z.copy())
    ground = _ground_level(pts, config.ground_cell)
    height = pts[:, 2] - ground
    density = VoxelIndex(pts, config.density_radius).count_within_many(pts).astype(np.float64)
    flat = np.column_stack([pts[:, 0], pts[:, 1], np.zeros(n)])
    _, _, hi = VoxelIndex(flat, config.column_radius, values=pts[:, 2]).value_range_within(flat)
    extent = hi - ground
    s = np.zeros(3) if sensor_xyz is None else np.asarray(sensor_xyz, dtype=np.float64)
    rng = np.hypot(pts[:, 0] - s[0], pts[:, 1] - s[1])
    return PointFeatures(height, density, rng, extent)


def scene_features(scene: Scene, config: DetectorConfig = DetectorConfig()) -> PointFeatures:
    return compute_features(scene.world_cloud().points, scene.sensor_pose.translation, config)


@dataclass
class DetectorModel:
    weights: np.ndarray  # (NUM_CLASSES, N_FEATURES)
    size_priors: tuple = DEFAULT_SIZE_PRIORS
    class_names: tuple = CLASS_NAMES
    source_stats: Optional[dict] = None  # {"class_counts": [...], "scene_count": n}

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (NUM_CLASSES, N_FEATURES):
            raise ValueError(f"weights must have shape {(NUM_CLASSES, N_FEATURES)}, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if tuple(self.class_names) != CLASS_NAMES:
            raise ValueError(f"class_names must be {CLASS_NAMES}")
        self.size_priors = tuple(tuple(float(v) for v in s) for s in self.size_priors)

    @classmethod
    def zeros(cls, size_priors=DEFAULT_SIZE_PRIORS):
        return cls(np.zeros((NUM_CLASSES, N_FEATURES)), size_priors)

    def copy(self):
        return replace(self, weights=self.weights.copy())

    def to_json(self) -> dict:
        d = {
            "weights": self.weights.tolist(),
            "class_names": list(self.class_names),
            "size_priors": [list(s) for s in self.size_priors],
        }
        if self.source_stats is not None:
            d["source_stats"] = self.source_stats
        return d

    @classmethod
    def from_json(cls, d: dict):
        try:
            return cls(np.asarray(d["weights"], dtype=np.float64), tuple(d["size_priors"]),
                       tuple(d["class_names"]), d.get("source_stats"))
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed model: {e}") from e


def save_model(model: DetectorModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> DetectorModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e
    return DetectorModel.from_json(d)


# --- stage 1 ----------------------------------------------------------------------


def stage1_predict(model: DetectorModel, X: np.ndarray) -> np.ndarray:
    """Per-class foreground probabilities, shape (n, NUM_CLASSES)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise ValueError(f"feature matrix must be (n, {N_FEATURES})")
    return sigmoid(X @ model.weights.T)


def stage1_loss(model: DetectorModel, X, Y, focal: FocalConfig = FocalConfig()) -> float:
    return float(focal_loss(stage1_predict(model, X), Y, focal).mean())


@numba.njit(cache=True, nogil=True, inline="always")
def _ipow(x, g):
    # exact products for the common integer exponents
    if g == 2.0:
        return x * x
    if g == 1.0:
        return x
    if g == 0.0:
        return 1.0
    return x**g


@numba.njit(cache=True, nogil=True)
def _focal_pass(X, w, y, alpha, gamma, eps):
    """Mean focal loss of one linear class and its weight gradient, in one sweep."""
    n, d = X.shape
    grad = np.zeros(d)
    total = 0.0
    for i in range(n):
        z = 0.0
        for k in range(d):
            z += X[i, k] * w[k]
        p = 0.5 * (1.0 + math.tanh(0.5 * z))
        p = min(max(p, eps), 1.0 - eps)
        q = 1.0 - p
        if y[i] > 0.5:
            lp = math.log(p)
            qg = _ipow(q, gamma)
            total -= alpha * qg * lp
            g = alpha * qg * (gamma * p * lp - q)
        else:
            lq = math.log1p(-p)
            pg = _ipow(p, gamma)
            total -= alpha * pg * lq
            g = alpha * pg * (p - gamma * q * lq)
        for k in range(d):
            grad[k] += g * X[i, k]
    return total / n, grad / n


def _focal_objective(X, W, Y, focal: FocalConfig):
    """(mean focal loss summed over classes, gradient per weight row)."""
    G = np.zeros_like(W)
    loss = 0.0
    for c in range(W.shape[0]):
        lc, G[c] = _focal_pass(X, np.ascontiguousarray(W[c]), np.ascontiguousarray(Y[:, c]),
                               float(focal.alpha), float(focal.gamma), EPS)
        loss += lc
    return loss, G


def stage1_train(model: DetectorModel, X, Y, focal: FocalConfig = FocalConfig(),
                 epochs: int = 10, learning_rate: float = 1.5e-3):
    """Full-batch gradient descent on the mean focal loss.

    Returns (new model, per-epoch losses before each step).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) != len(Y):
        raise ValueError("features and labels have different lengths")
    W = model.weights.copy()
    losses = []
    if len(X) == 0:
        return replace(model, weights=W), losses
    X = np.ascontiguousarray(X)
    for _ in range(epochs):
        loss, G = _focal_objective(X, W, Y, focal)
        losses.append(float(loss))
        W -= learning_rate * G
    return replace(model, weights=W), losses


# --- stage 2 ----------------------------------------------------------------------


def cluster_points(points: np.ndarray, eps: float) -> np.ndarray:
    """Single-linkage cluster labels (pairs strictly closer than eps are linked).

    Labels are numbered in order of each cluster's first point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return VoxelIndex(pts, eps).components()


def fit_box(points: np.ndarray, cls: int, confidence: float, prior, config: DetectorConfig = DetectorConfig(),
            provenance: Provenance = Provenance.DETECTION) -> LabeledBox:
    """Oriented box from the principal xy axes of a cluster, size blended with the prior."""
    pts = np.asarray(points, dtype=np.float64)
    xy = pts[:, :2]
    mu = xy.mean(axis=0)
    if len(pts) >= 2:
        cov = np.cov((xy - mu).T)
        evals, evecs = np.linalg.eigh(cov)
        axis = evecs[:, int(np.argmax(evals))]
    else:
        axis = np.array([1.0, 0.0])
    yaw = math.atan2(axis[1], axis[0])
    c, s = math.cos(yaw), math.sin(yaw)
    u = (xy - mu) @ np.array([c, s])
    v = (xy - mu) @ np.array([-s, c])
    u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
    center_xy = mu + 0.5 * (u0 + u1) * np.array([c, s]) + 0.5 * (v0 + v1) * np.array([-s, c])
    z0, z1 = pts[:, 2].min(), pts[:, 2].max()
    k = config.prior_blend
    length = (1 - k) * (u1 - u0) + k * prior[0]
    width = (1 - k) * (v1 - v0) + k * prior[1]
    height = max(z1 - z0, config.min_box_size)
    size = (max(length, config.min_box_size), max(width, config.min_box_size), height)
    center = (center_xy[0], center_xy[1], 0.5 * (z0 + z1))
    return LabeledBox(center, size, yaw, cls, float(np.clip(confidence, 0.0, 1.0)), provenance)


def stage2_propose(points: np.ndarray, probs: np.ndarray, model: DetectorModel,
                   config: DetectorConfig = DetectorConfig()) -> list:
    """Boxes from foreground clusters, sorted by descending confidence."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) != len(pts):
        raise ValueError("probabilities are not aligned with the points")
    fg = np.flatnonzero(probs.max(axis=1) > config.fg_threshold) if len(pts) else np.zeros(0, dtype=np.int64)
    if len(fg) == 0:
        return []
    labels = cluster_points(pts[fg], config.cluster_radius)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    boxes = []
    for group in np.split(order, bounds):
        if len(group) < config.min_cluster_points:
            continue
        members = fg[group]
        mean_p = probs[members].mean(axis=0)
        cls = int(np.argmax(mean_p))
        boxes.append(fit_box(pts[members], cls, mean_p[cls], model.size_priors[cls], config))
    boxes.sort(key=lambda b: -b.confidence)
    return boxes


def detect(model: DetectorModel, scene: Scene, config: DetectorConfig = DetectorConfig(),
           features: Optional[PointFeatures] = None) -> list:
    """World-frame detections for one scene."""
    pts = scene.world_cloud().points
    feats = scene_features(scene, config) if features is None else features
    probs = stage1_predict(model, feats.matrix(config))
    return stage2_propose(pts, probs, model, config)


def fit_stage1(X, Y, focal: FocalConfig = FocalConfig(), initial: Optional[np.ndarray] = None,
               max_iter: int = 200) -> np.ndarray:
    """Minimise the mean focal loss per class with L-BFGS; returns weights."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    W = np.zeros((NUM_CLASSES, N_FEATURES)) if initial is None else np.array(initial, dtype=np.float64)
    X = np.ascontiguousarray(X)

    for c in range(NUM_CLASSES):
        y = np.ascontiguousarray(Y[:, c])

        def objective(w):
            return _focal_pass(X, np.ascontiguousarray(w), y, float(focal.alpha), float(focal.gamma), EPS)

        res = minimize(objective, W[c], jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
        W[c] = res.x
    return W


def train_source(scenes, config: DetectorConfig = DetectorConfig(), focal: FocalConfig = FocalConfig(),
                 features: Optional[dict] = None, max_iter: int = 200, threads=None) -> DetectorModel:
    """Fit stage 1 on labelled source scenes.

    Size priors are the mean labelled box sizes (falling back to the
    defaults for absent classes); the per-class box counts and scene count
    are kept with the model for pseudo-label capping.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no source scenes")
    for sc in scenes:
        if sc.gt_boxes is None:
            raise ValueError(f"source scene {sc.scene_id!r} has no labels")
    if features is None:
        feats = pmap(lambda s: scene_features(s, config), scenes, threads)
    else:
        feats = [features[s.scene_id] for s in scenes]
    X = np.concatenate([f.matrix(config) for f in feats])
    Y = np.concatenate([labels_from_boxes(s.world_cloud().points, s.gt_boxes).labels for s in scenes])
    sizes = {c: [] for c in range(NUM_CLASSES)}
    for sc in scenes:
        for b in sc.gt_boxes:
            sizes[b.cls].append(b.size)
    priors = tuple(
        tuple(np.mean(sizes[c], axis=0).tolist()) if sizes[c] else DEFAULT_SIZE_PRIORS[c] for c in range(NUM_CLASSES)
    )
    W = fit_stage1(X, Y, focal, max_iter=max_iter)
    stats = {"class_counts": [len(sizes[c]) for c in range(NUM_CLASSES)], "scene_count": len(scenes)}
    return DetectorModel(W, priors, CLASS_NAMES, stats)
