"""Persistence prior (PP) scores from repeated traversals.

For a query point q, count its neighbours within radius r in each
traversal's aggregated cloud, normalise the counts into a distribution over
traversals and report its entropy divided by log(T). Uniform occupancy gives
1 (static background); occupancy in a single traversal gives 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Frame, PointCloud, Scene
from .ingest import TraversalStore
from .parallel import default_threads, pmap


@dataclass(frozen=True)
class PPConfig:
    radius: float = 0.3
    max_traversals: int = 5
    exclude_self: bool = False

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if self.max_traversals < 2:
            raise ValueError("max_traversals must be >= 2")


@dataclass(frozen=True, eq=False)
class PPField:
    counts: np.ndarray  # (n, T) int
    probs: np.ndarray  # (n, T); all-zero rows where no traversal has neighbours
    tau: np.ndarray  # (n,)
    traversal_ids: tuple
    radius: float
    exclude_self: bool

    @property
    def T(self) -> int:
        return len(self.traversal_ids)

    def __len__(self):
        return self.tau.shape[0]


def _selected(store: TraversalStore, exclude: Optional[str]) -> list:
    tids = [t for t in store.traversal_ids if t != exclude]
    if len(tids) < 2:
        raise ValueError(
            f"location {store.location_id!r}: {len(tids)} traversal(s) left after exclusion; need at least 2"
        )
    return tids


def count_matrix(store: TraversalStore, queries: np.ndarray, radius: float, exclude: Optional[str] = None,
                 threads=None) -> np.ndarray:
    tids = _selected(store, exclude)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    cols = [store.index(t, radius) for t in tids]
    n = default_threads() if threads is None else threads
    if n > 1 and len(q) > 4096:
        chunks = np.array_split(np.arange(len(q)), n)
        out = np.empty((len(q), len(tids)), dtype=np.int64)
        for j, idx in enumerate(cols):
            parts = pmap(lambda c: idx.count_within_many(q[c]), chunks, n)
            for c, part in zip(chunks, parts):
                out[c, j] = part
        return out
    if len(q) == 0:
        return np.zeros((0, len(tids)), dtype=np.int64)
    return np.column_stack([idx.count_within_many(q) for idx in cols])


def count_vector(store: TraversalStore, q, radius: float = 0.3, exclude: Optional[str] = None) -> np.ndarray:
    """Per-traversal neighbour counts for a single point, in store order."""
    return count_matrix(store, np.asarray(q, dtype=np.float64).reshape(1, 3), radius, exclude)[0]


def normalize_counts(counts) -> np.ndarray:
    """Counts → categorical distribution; all-zero input gives an all-zero vector."""
    c = np.asarray(counts, dtype=np.float64)
    s = c.sum(axis=-1, keepdims=True)
    return np.divide(c, s, out=np.zeros_like(c), where=s > 0)


def pp_scores(counts) -> np.ndarray:
    """Vectorised normalised entropy over rows of a count matrix."""
    c = np.asarray(counts, dtype=np.int64)
    if c.ndim == 1:
        c = c[None, :]
    T = c.shape[1]
    if T < 2:
        raise ValueError("PP-score needs at least 2 traversals")
    # sorting each row makes the summation order, and so the result, permutation-invariant
    c = np.sort(c, axis=1)
    p = normalize_counts(c)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    h = terms.sum(axis=1)
    nonzero = (c > 0).sum(axis=1)
    # entropy of a uniform distribution over k traversals is exactly log k
    cmax = c[:, -1]
    uniform = (nonzero > 0) & np.all((c == 0) | (c == cmax[:, None]), axis=1)
    h = np.where(uniform, np.log(np.maximum(nonzero, 1)), h)
    tau = h / np.log(T)
    tau = np.where(nonzero == 0, 0.0, tau)
    return np.clip(tau, 0.0, 1.0)


def pp_score(counts) -> float:
    return float(pp_scores(np.asarray(counts).reshape(1, -1))[0])


def score_points(store: TraversalStore, points: np.ndarray, config: PPConfig = PPConfig(),
                 exclude: Optional[str] = None, threads=None) -> PPField:
    tids = tuple(_selected(store, exclude))
    counts = count_matrix(store, points, config.radius, exclude, threads)
    return PPField(counts, normalize_counts(counts), pp_scores(counts) if len(counts) else np.zeros(0),
                   tids, config.radius, exclude is not None)


def score_scene(scene: Scene, stores, config: PPConfig = PPConfig(), threads=None) -> PPField:
    """PP-score every point of ``scene`` (evaluated in the world frame)."""
    store = stores[scene.location_id] if isinstance(stores, dict) else stores
    if isinstance(stores, dict) and scene.location_id not in stores:
        raise KeyError(f"no traversal store for location {scene.location_id!r}")
    if store.location_id != scene.location_id:
        raise ValueError(f"store is for location {store.location_id!r}, scene is at {scene.location_id!r}")
    world = scene.world_cloud()
    assert world.frame == Frame.WORLD
    exclude = scene.traversal_id if config.exclude_self else None
    return score_points(store, world.points, config, exclude, threads)


def score_cloud(cloud: PointCloud, store: TraversalStore, config: PPConfig = PPConfig()) -> PPField:
    if cloud.frame != Frame.WORLD:
        raise ValueError("PP-scores are computed on world-frame points; transform the cloud first")
    return score_points(store, cloud.points, config)


def write_tau(path, tau: np.ndarray) -> None:
    Path(path).write_text(json.dumps([float(v) for v in tau]) + "\n", encoding="utf-8")


def read_tau(path) -> np.ndarray:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    tau = np.asarray(raw, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(tau)) or np.any((tau < 0) | (tau > 1)):
        raise ValueError(f"{path}: PP-scores must lie in [0, 1]")
    return tau
