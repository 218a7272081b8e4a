"""Point-label supervision for the stage-1 classifier.

``fbs_rewrite`` overrides per-point pseudo-labels with PP-score evidence;
``focal_loss``/``focal_loss_grad`` give the one-vs-all focal loss and its
gradient with respect to pre-sigmoid logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NUM_CLASSES, LabelSource, PointLabelSet, points_in_box

EPS = 1e-7


@dataclass(frozen=True)
class FBSConfig:
    tau_upper: float = 0.7
    tau_lower: float = 0.3

    def __post_init__(self):
        if not self.tau_lower < self.tau_upper:
            raise ValueError("tau_lower must be < tau_upper")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("focal alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")


def fbs_rewrite(labels: PointLabelSet, tau, config: FBSConfig = FBSConfig()) -> PointLabelSet:
    """Persistent points become background; ephemeral unlabelled points become all-foreground."""
    tau = np.asarray(getattr(tau, "tau", tau), dtype=np.float64)
    y = np.array(labels.labels, copy=True)
    if len(tau) != len(y):
        raise ValueError("PP-scores are not aligned with the labels")
    persistent = tau > config.tau_upper
    unlabelled = ~y.any(axis=1)
    ephemeral = (tau < config.tau_lower) & unlabelled & ~persistent
    y[persistent] = 0
    y[ephemeral] = 1
    return PointLabelSet(y, LabelSource.REWRITTEN_FBS)


def labels_from_boxes(points: np.ndarray, boxes) -> PointLabelSet:
    """One-hot labels from the most confident box containing each point.

    Equal confidences resolve to the box listed first.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    y = np.zeros((len(pts), NUM_CLASSES), dtype=np.uint8)
    best = np.full(len(pts), -np.inf)
    for b in boxes:
        inside = points_in_box(b, pts) & (b.confidence > best)
        y[inside] = 0
        y[inside, b.cls] = 1
        best[inside] = b.confidence
    return PointLabelSet(y, LabelSource.FROM_BOXES)


def _clip(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def focal_loss(p, y, config: FocalConfig = FocalConfig()):
    """Focal loss summed over classes; per point when ``p`` is 2-D."""
    p = _clip(p)
    y = np.asarray(y, dtype=np.float64)
    a, g = config.alpha, config.gamma
    per_class = y * (1.0 - p) ** g * np.log(p) + (1.0 - y) * p**g * np.log1p(-p)
    return -a * per_class.sum(axis=-1)


def focal_loss_grad(p, y, config: FocalConfig = FocalConfig()):
    """d(focal_loss)/d(logit) per class, where ``p = sigmoid(logit)``."""
    p = _clip(p)
    y = np.asarray(y, dtype=np.float64)
    a, g = config.alpha, config.gamma
    q = 1.0 - p
    pos = a * q**g * (g * p * np.log(p) - q)
    neg = a * p**g * (p - g * q * np.log(q))
    return y * pos + (1.0 - y) * neg


def focal_loss_and_grad(p, y, config: FocalConfig = FocalConfig()):
    """Per-point loss and logit gradient together, sharing the logarithms."""
    p = _clip(p)
    y = np.asarray(y, dtype=np.float64)
    a, g = config.alpha, config.gamma
    q = 1.0 - p
    lp, lq = np.log(p), np.log1p(-p)
    qg, pg = q**g, p**g
    pos = y > 0.5
    loss = -a * np.where(pos, qg * lp, pg * lq)
    grad = a * np.where(pos, qg * (g * p * lp - q), pg * (p - g * q * lq))
    if loss.ndim > 1:
        loss = loss.sum(axis=-1)
    return loss, grad


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))
