"""Repeated-traversal dataset I/O and per-traversal aggregation.

On-disk layout (all paths relative to the dataset root)::

    manifest.json     {"locations": [{"id", "traversals": [{"id", "scans": [{"cloud", "pose"}]}]}],
                       "scenes": [{"id", "location", "traversal", "scan_index", "labels"?}]}
    *.xyz             ASCII "x y z" per line
    *.pose.json       {"rotation": 3x3, "translation": [tx, ty, tz]}
    *.boxes.json      [{"center", "size", "yaw", "class", "score"}]
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    CLASS_NAMES,
    Frame,
    LabeledBox,
    PointCloud,
    Pose6DoF,
    Provenance,
    Scene,
    class_id,
    transform_cloud,
)
from .parallel import pmap
from .spatial import VoxelIndex

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    """Malformed dataset content."""


@dataclass(frozen=True)
class ScanRecord:
    cloud: str
    pose: str


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    location_id: str
    traversal_id: str
    scan_index: int
    labels: Optional[str] = None


@dataclass
class DatasetManifest:
    root: Path
    # location -> traversal -> scans, both levels sorted by id
    locations: dict
    scenes: list

    def traversal_ids(self, location_id: str) -> list:
        return list(self.locations[location_id])

    def scene(self, scene_id: str) -> SceneRecord:
        for rec in self.scenes:
            if rec.scene_id == scene_id:
                return rec
        raise KeyError(f"scene {scene_id!r} not in manifest")

    def scan(self, rec: SceneRecord) -> ScanRecord:
        return self.locations[rec.location_id][rec.traversal_id][rec.scan_index]

    def path(self, rel: str) -> Path:
        return self.root / rel


def _require(obj, key, what):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(f"{what}: missing key {key!r}")
    return obj[key]


def load_manifest(root, require_pp: bool = False) -> DatasetManifest:
    """Read and validate ``root/manifest.json``.

    With ``require_pp`` every location referenced by a scene must have at
    least two traversals.
    """
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise FileNotFoundError(f"{MANIFEST_NAME} not found in {root}")
    try:
        raw = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid JSON ({e})") from None

    locations = {}
    for loc in _require(raw, "locations", "manifest"):
        lid = str(_require(loc, "id", "location"))
        if lid in locations:
            raise DatasetError(f"duplicate location id {lid!r}")
        travs = {}
        for trav in _require(loc, "traversals", f"location {lid!r}"):
            tid = str(_require(trav, "id", f"traversal in location {lid!r}"))
            if tid in travs:
                raise DatasetError(f"duplicate traversal id {tid!r} in location {lid!r}")
            scans = []
            for k, scan in enumerate(_require(trav, "scans", f"traversal {lid}/{tid}")):
                what = f"scan {k} of traversal {lid}/{tid}"
                rec = ScanRecord(str(_require(scan, "cloud", what)), str(_require(scan, "pose", what)))
                for rel in (rec.cloud, rec.pose):
                    if not (root / rel).is_file():
                        raise FileNotFoundError(f"{what} references missing file {root / rel}")
                scans.append(rec)
            travs[tid] = scans
        locations[lid] = dict(sorted(travs.items()))
    locations = dict(sorted(locations.items()))

    scenes = []
    seen = set()
    for s in _require(raw, "scenes", "manifest"):
        sid = str(_require(s, "id", "scene"))
        if sid in seen:
            raise DatasetError(f"duplicate scene id {sid!r}")
        seen.add(sid)
        lid = str(_require(s, "location", f"scene {sid!r}"))
        tid = str(_require(s, "traversal", f"scene {sid!r}"))
        idx = _require(s, "scan_index", f"scene {sid!r}")
        if lid not in locations:
            raise DatasetError(f"scene {sid!r} references unknown location {lid!r}")
        if tid not in locations[lid]:
            raise DatasetError(f"scene {sid!r} references unknown traversal {lid}/{tid}")
        if not isinstance(idx, int) or not 0 <= idx < len(locations[lid][tid]):
            raise DatasetError(f"scene {sid!r} has invalid scan_index {idx!r}")
        labels = s.get("labels")
        if labels is not None and not (root / labels).is_file():
            raise FileNotFoundError(f"scene {sid!r} references missing label file {root / labels}")
        if require_pp and len(locations[lid]) < 2:
            raise DatasetError(
                f"scene {sid!r}: location {lid!r} has {len(locations[lid])} traversal(s); PP-scores need at least 2"
            )
        scenes.append(SceneRecord(sid, lid, tid, idx, labels))
    scenes.sort(key=lambda r: r.scene_id)
    return DatasetManifest(root, locations, scenes)


def write_manifest(root, locations: dict, scenes: list) -> Path:
    doc = {
        "locations": [
            {
                "id": lid,
                "traversals": [
                    {"id": tid, "scans": [{"cloud": s.cloud, "pose": s.pose} for s in scans]}
                    for tid, scans in travs.items()
                ],
            }
            for lid, travs in locations.items()
        ],
        "scenes": [
            {"id": r.scene_id, "location": r.location_id, "traversal": r.traversal_id, "scan_index": r.scan_index,
             **({"labels": r.labels} if r.labels is not None else {})}
            for r in scenes
        ],
    }
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


# --- point / pose / box files -------------------------------------------------


def read_xyz(path) -> np.ndarray:
    path = Path(path)
    text = path.read_text(encoding="ascii")
    try:
        flat = np.array(text.split(), dtype=np.float64)
        ok = flat.size % 3 == 0 and np.all(np.isfinite(flat))
    except ValueError:
        ok = False
    if ok:
        pts = flat.reshape(-1, 3)
        nlines = text.count("\n") + (0 if text.endswith("\n") or not text else 1)
        if len(pts) == nlines and text.count(" ") == 2 * nlines:
            return pts
    # slow path: locate the offending line
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split(" ")
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 3 space-separated reals, got {line!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: unparsable coordinate in {line!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"{path}:{lineno}: non-finite coordinate in {line!r}")
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_xyz(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text(("%.6f %.6f %.6f\n" * len(pts)) % tuple(pts.ravel()), encoding="ascii")


def read_pose(path) -> Pose6DoF:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return Pose6DoF(np.array(raw["rotation"], dtype=np.float64), np.array(raw["translation"], dtype=np.float64))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: malformed pose ({e})") from None
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from None


def write_pose(path, pose: Pose6DoF) -> None:
    doc = {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def box_to_json(b: LabeledBox) -> dict:
    return {"center": list(b.center), "size": list(b.size), "yaw": b.yaw, "class": b.class_name, "score": b.confidence}


def box_from_json(d: dict, provenance=Provenance.GROUND_TRUTH) -> LabeledBox:
    prov = Provenance(provenance)
    score = 1.0 if prov == Provenance.GROUND_TRUTH else float(d.get("score", 1.0))
    return LabeledBox(d["center"], d["size"], float(d["yaw"]), class_id(d["class"]), score, prov)


def read_boxes(path, provenance=Provenance.GROUND_TRUTH) -> list:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return [box_from_json(d, provenance) for d in raw]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: malformed box record ({e})") from None
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from None


def write_boxes(path, boxes) -> None:
    Path(path).write_text(json.dumps([box_to_json(b) for b in boxes], indent=1) + "\n", encoding="utf-8")


# --- scenes and traversal stores ----------------------------------------------


def load_scene(manifest: DatasetManifest, scene_id: str) -> Scene:
    rec = manifest.scene(scene_id)
    scan = manifest.scan(rec)
    cloud = PointCloud(read_xyz(manifest.path(scan.cloud)), Frame.SENSOR)
    pose = read_pose(manifest.path(scan.pose))
    boxes = None
    if rec.labels is not None:
        boxes = read_boxes(manifest.path(rec.labels), Provenance.GROUND_TRUTH)
    return Scene(rec.scene_id, rec.location_id, rec.traversal_id, cloud, pose, boxes)


def load_scenes(manifest: DatasetManifest, threads=None) -> list:
    return pmap(lambda r: load_scene(manifest, r.scene_id), manifest.scenes, threads)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point of every occupied voxel (input order)."""
    cells = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return points[np.sort(first)]


@dataclass
class TraversalStore:
    """Aggregated world-frame clouds of one location, one per traversal."""

    location_id: str
    clouds: dict  # traversal_id -> PointCloud (world)
    _indices: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.clouds) < 2:
            raise DatasetError(f"location {self.location_id!r}: need at least 2 traversals, got {len(self.clouds)}")
        for tid, c in self.clouds.items():
            if c.frame != Frame.WORLD:
                raise DatasetError(f"store {self.location_id}/{tid} is not in the world frame")
            if len(c) == 0:
                raise DatasetError(f"store {self.location_id}/{tid} is empty")

    @property
    def traversal_ids(self) -> list:
        return list(self.clouds)

    @property
    def T(self) -> int:
        return len(self.clouds)

    def index(self, traversal_id: str, radius: float) -> VoxelIndex:
        key = (traversal_id, float(radius))
        if key not in self._indices:
            self._indices[key] = VoxelIndex(self.clouds[traversal_id].points, radius)
        return self._indices[key]


def aggregate_scans(clouds, poses, voxel_size: Optional[float] = None) -> PointCloud:
    """Concatenate sensor-frame scans in the world frame."""
    parts = [transform_cloud(c, p).points for c, p in zip(clouds, poses)]
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    if voxel_size:
        pts = voxel_downsample(pts, voxel_size)
    return PointCloud(pts, Frame.WORLD)


def build_traversal_store(
    manifest: DatasetManifest,
    location: str,
    max_traversals: int = 5,
    aggregate_voxel_size: Optional[float] = None,
    threads=None,
) -> TraversalStore:
    if max_traversals < 1:
        raise ValueError("max_traversals must be positive")
    if location not in manifest.locations:
        raise DatasetError(f"unknown location {location!r}")
    travs = manifest.locations[location]
    if len(travs) < 2:
        raise DatasetError(f"location {location!r} has {len(travs)} traversal(s); PP-scores need at least 2")
    chosen = list(travs)[:max_traversals]

    def build(tid):
        scans = travs[tid]
        clouds = [PointCloud(read_xyz(manifest.path(s.cloud)), Frame.SENSOR) for s in scans]
        poses = [read_pose(manifest.path(s.pose)) for s in scans]
        return aggregate_scans(clouds, poses, aggregate_voxel_size)

    clouds = dict(zip(chosen, pmap(build, chosen, threads)))
    log.debug("store %s: %s", location, {t: len(c) for t, c in clouds.items()})
    return TraversalStore(location, clouds)


def build_all_stores(manifest: DatasetManifest, max_traversals: int = 5, aggregate_voxel_size=None, threads=None) -> dict:
    needed = sorted({r.location_id for r in manifest.scenes})
    return {
        lid: build_traversal_store(manifest, lid, max_traversals, aggregate_voxel_size, threads) for lid in needed
    }


def class_counts(scenes) -> dict:
    """Ground-truth object count per class name over labelled scenes."""
    counts = {name: 0 for name in CLASS_NAMES}
    for s in scenes:
        for b in s.gt_boxes or ():
            counts[b.class_name] += 1
    return counts
