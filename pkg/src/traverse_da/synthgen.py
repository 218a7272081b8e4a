"""Deterministic synthetic multi-traversal LiDAR worlds.

A location is a straight road segment driven repeatedly. Static structures
(buildings, poles, hedges) are fixed per location; dynamic objects are
re-sampled on the lanes for every traversal. Surfaces are sampled with a
jittered grid whose density falls off as 1/range^2 from the sensor, so
per-traversal sampling density at a static surface is nearly constant.
Occlusion is not modelled.

Objects float ``dynamic_clearance`` above the ground (wheels and feet are
not modelled), which keeps every dynamic point more than the PP radius away
from persistent ground.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    NUM_CLASSES,
    Frame,
    LabeledBox,
    PointCloud,
    Pose6DoF,
    Provenance,
    Scene,
    rot_z,
)
from .ingest import (
    DatasetManifest,
    ScanRecord,
    SceneRecord,
    TraversalStore,
    aggregate_scans,
    load_manifest,
    write_boxes,
    write_manifest,
    write_pose,
    write_xyz,
)
from .parallel import pmap

GROUND, STATIC, DYNAMIC = 0, 1, 2
KIND_NAMES = ("ground", "static", "dynamic")


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_locations: int = 2
    traversals: int = 5
    scans_per_traversal: int = 6
    scan_spacing: float = 8.0
    scene_stride: int = 1
    margin: float = 15.0  # area beyond the first/last scan along the road
    half_width: float = 20.0
    sensor_height: float = 1.8
    max_range: float = 50.0
    density: float = 6.0  # points per m^2 at 10 m
    ground_density_factor: float = 0.3
    ground_tile: float = 2.0
    ground_noise: float = 0.02
    sensor_noise: float = 0.01
    pose_jitter: float = 0.2
    buildings_per_side: int = 3
    building_setback: tuple = (13.0, 16.0)
    building_length: tuple = (8.0, 16.0)
    building_depth: tuple = (4.0, 8.0)
    building_height: tuple = (5.0, 9.0)
    poles_per_side: int = 2
    pole_height: tuple = (4.0, 6.0)
    hedges_per_side: int = 0
    hedge_offset: tuple = (8.0, 9.5)
    hedge_length: tuple = (3.0, 7.0)
    hedge_height: tuple = (2.2, 2.8)
    lanes: tuple = (-5.2, -1.75, 1.75, 5.2)
    # expected objects per class per traversal of a location
    class_frequency: tuple = (6.0, 0.0, 0.0)
    class_size_mean: tuple = ((4.0, 1.8, 1.1), (0.7, 0.7, 1.25), (1.7, 0.6, 1.2))
    class_size_std: tuple = ((0.2, 0.08, 0.06), (0.08, 0.08, 0.08), (0.1, 0.05, 0.06))
    dynamic_clearance: float = 0.5
    surface_inset: float = 0.05  # sampled object surface sits this far inside its label box
    object_clearance: float = 0.5
    min_displacement: float = 2.0
    min_gt_points: int = 5
    structures: Optional[tuple] = None  # explicit ((cx, cy, cz), (l, w, h), yaw) slabs in location frame

    def __post_init__(self):
        if self.traversals < 2:
            raise ValueError("a world needs at least 2 traversals")
        if self.scans_per_traversal < 1 or self.scene_stride < 1:
            raise ValueError("scans_per_traversal and scene_stride must be >= 1")
        if self.density <= 0:
            raise ValueError("density must be > 0")

    @property
    def road_length(self) -> float:
        return (self.scans_per_traversal - 1) * self.scan_spacing

    @property
    def extent(self) -> tuple:
        """(x_min, x_max, y_min, y_max) of the sampled area in the location frame."""
        return (-self.margin, self.road_length + self.margin, -self.half_width, self.half_width)


@dataclass(frozen=True)
class DomainShiftSpec:
    car_scale: float = 1.15
    class_frequency_multipliers: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.car_scale <= 0 or any(m < 0 for m in self.class_frequency_multipliers):
            raise ValueError("scale factors must be positive")


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def world_from_dict(d: dict) -> WorldSpec:
    known = {f for f in WorldSpec.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown world spec keys: {sorted(unknown)}")
    return WorldSpec(**{k: _tuplify(v) for k, v in d.items()})


def shift_from_dict(d: dict) -> DomainShiftSpec:
    unknown = set(d) - set(DomainShiftSpec.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown domain shift keys: {sorted(unknown)}")
    return DomainShiftSpec(**{k: _tuplify(v) for k, v in d.items()})


# --- geometry helpers -----------------------------------------------------------


@dataclass(frozen=True)
class Slab:
    center: tuple
    size: tuple
    yaw: float
    kind: int
    object_id: int = -1
    cls: int = -1


def _slab_patches(slab: Slab, tile: float):
    """Split the five visible faces (no bottom) into patches of edge <= tile.

    Returns (origin, U, V) arrays: patch = origin + a*U + b*V, a, b in [0, 1].
    """
    l, w, h = slab.size
    R = rot_z(slab.yaw)
    c = np.asarray(slab.center, dtype=np.float64)
    ex, ey, ez = R[:, 0] * l, R[:, 1] * w, np.array([0.0, 0.0, h])
    corner = c - 0.5 * (ex + ey + ez)
    faces = [
        (corner, ex, ez),  # -y side
        (corner + ey, ex, ez),  # +y side
        (corner, ey, ez),  # -x side
        (corner + ex, ey, ez),  # +x side
        (corner + ez, ex, ey),  # top
    ]
    origins, us, vs = [], [], []
    for o, U, V in faces:
        nu = max(1, math.ceil(np.linalg.norm(U) / tile))
        nv = max(1, math.ceil(np.linalg.norm(V) / tile))
        a, b = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        a, b = a.ravel(), b.ravel()
        origins.append(o + np.outer(a / nu, U) + np.outer(b / nv, V))
        us.append(np.repeat((U / nu)[None], len(a), axis=0))
        vs.append(np.repeat((V / nv)[None], len(a), axis=0))
    return np.concatenate(origins), np.concatenate(us), np.concatenate(vs)


def _sample_patches(rng, origins, U, V, density, sensor, noise, max_range):
    """Jittered-grid sampling; expected count per patch = area * density."""
    if len(origins) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    lu = np.linalg.norm(U, axis=1)
    lv = np.linalg.norm(V, axis=1)
    centers = origins + 0.5 * (U + V)
    rng_dist = np.maximum(np.linalg.norm(centers - sensor, axis=1), 3.0)
    dens = density * (10.0 / rng_dist) ** 2
    reach = rng_dist - 0.5 * np.hypot(lu, lv) <= max_range
    expected = lu * lv * dens
    nu = np.where(reach, np.maximum(1, np.ceil(lu * np.sqrt(dens))), 0).astype(np.int64)
    nv = np.where(reach, np.maximum(1, np.ceil(lv * np.sqrt(dens))), 0).astype(np.int64)
    cells = nu * nv
    keep_p = np.divide(expected, cells, out=np.zeros_like(expected), where=cells > 0)
    total = int(cells.sum())
    pid = np.repeat(np.arange(len(origins)), cells)
    local = np.arange(total) - np.repeat(np.cumsum(cells) - cells, cells)
    iu = local // nv[pid]
    iv = local % nv[pid]
    jitter = rng.random((total, 2))
    keep = rng.random(total) < keep_p[pid]
    a = (iu + jitter[:, 0]) / nu[pid]
    b = (iv + jitter[:, 1]) / nv[pid]
    pts = origins[pid] + a[:, None] * U[pid] + b[:, None] * V[pid]
    pts, pid = pts[keep], pid[keep]
    pts = pts + rng.normal(0.0, noise, pts.shape)
    inside = np.linalg.norm(pts - sensor, axis=1) <= max_range
    return pts[inside], pid[inside]


def _point_rect_distance(p, slab: Slab) -> float:
    """BEV distance from point p to the slab's footprint (0 if inside)."""
    d = np.asarray(p[:2], dtype=np.float64) - np.asarray(slab.center[:2])
    c, s = math.cos(slab.yaw), math.sin(slab.yaw)
    u, v = c * d[0] + s * d[1], -s * d[0] + c * d[1]
    du = max(abs(u) - slab.size[0] / 2, 0.0)
    dv = max(abs(v) - slab.size[1] / 2, 0.0)
    return math.hypot(du, dv)


# --- world construction ---------------------------------------------------------


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _static_structures(world: WorldSpec, loc: int) -> list:
    if world.structures is not None:
        return [Slab(tuple(c), tuple(s), float(y), STATIC) for c, s, y in world.structures]
    rng = np.random.default_rng([world.seed, loc, 1])
    x0, x1, _, _ = world.extent
    out = []
    for side in (-1, 1):
        # buildings: one per equal slot along the road, randomised inside it
        slot = (x1 - x0) / max(world.buildings_per_side, 1)
        for k in range(world.buildings_per_side):
            length = min(_uniform(rng, world.building_length), slot - 1.0)
            depth = _uniform(rng, world.building_depth)
            height = _uniform(rng, world.building_height)
            cx = x0 + slot * (k + 0.5) + rng.uniform(-0.5, 0.5) * (slot - length - 1.0)
            cy = side * (_uniform(rng, world.building_setback) + depth / 2)
            out.append(Slab((cx, cy, height / 2), (length, depth, height), 0.0, STATIC))
        placed = []
        for _ in range(world.hedges_per_side):
            for _attempt in range(50):
                length = _uniform(rng, world.hedge_length)
                width = rng.uniform(0.6, 1.0)
                height = _uniform(rng, world.hedge_height)
                cx = rng.uniform(x0 + length / 2, x1 - length / 2)
                cy = side * _uniform(rng, world.hedge_offset)
                cand = Slab((cx, cy, height / 2), (length, width, height), 0.0, STATIC)
                if all(abs(cx - p.center[0]) > (length + p.size[0]) / 2 + 1.5 for p in placed):
                    placed.append(cand)
                    break
        out.extend(placed)
        for _ in range(world.poles_per_side):
            for _attempt in range(50):
                height = _uniform(rng, world.pole_height)
                cx = rng.uniform(x0, x1)
                cy = side * 7.2
                if all(_point_rect_distance((cx, cy), p) > 1.0 for p in placed):
                    out.append(Slab((cx, cy, height / 2), (0.25, 0.25, height), 0.0, STATIC))
                    break
    return out


def _sample_objects(world: WorldSpec, shift: Optional[DomainShiftSpec], loc: int, trav: int,
                    statics: list, placed_other: list, next_id: int) -> list:
    """Dynamic objects for one traversal of one location (location frame)."""
    rng = np.random.default_rng([world.seed, loc, trav, 2])
    x0, x1, _, _ = world.extent
    mult = shift.class_frequency_multipliers if shift else (1.0,) * NUM_CLASSES
    objs = []
    for cls in range(NUM_CLASSES):
        n = int(rng.poisson(world.class_frequency[cls] * mult[cls]))
        mean = np.asarray(world.class_size_mean[cls], dtype=np.float64)
        std = np.asarray(world.class_size_std[cls], dtype=np.float64)
        for _ in range(n):
            for _attempt in range(100):
                size = np.maximum(mean + std * rng.standard_normal(3), 0.3 * mean)
                if cls == 0 and shift is not None:
                    size[:2] *= shift.car_scale
                lane = world.lanes[int(rng.integers(len(world.lanes)))]
                yaw = (0.0 if lane > 0 else math.pi) + rng.normal(0.0, 0.05)
                cx = rng.uniform(x0 + size[0], x1 - size[0])
                cy = lane + rng.normal(0.0, 0.15)
                radius = 0.5 * math.hypot(size[0], size[1])
                clear_static = all(
                    _point_rect_distance((cx, cy), s) > radius + world.object_clearance for s in statics
                )
                clear_dyn = all(
                    math.hypot(cx - o.center[0], cy - o.center[1])
                    > max(radius + 0.5 * math.hypot(o.size[0], o.size[1]) + world.object_clearance,
                          world.min_displacement)
                    for o in placed_other + objs
                )
                if clear_static and clear_dyn:
                    cz = world.dynamic_clearance + size[2] / 2
                    objs.append(Slab((cx, cy, cz), tuple(size), yaw, DYNAMIC, next_id + len(objs), cls))
                    break
    return objs


@dataclass
class Scan:
    cloud: PointCloud  # sensor frame
    pose: Pose6DoF  # sensor -> world
    kinds: np.ndarray
    object_ids: np.ndarray
    boxes: list  # world-frame ground truth with >= min_gt_points points in this scan


@dataclass
class SyntheticDataset:
    world: WorldSpec
    shift: Optional[DomainShiftSpec]
    scans: dict  # location_id -> traversal_id -> [Scan]
    scene_records: list
    objects: dict = field(default_factory=dict)  # location_id -> traversal_id -> [LabeledBox] (all objects)

    def scene(self, rec: SceneRecord, with_labels: bool = True) -> Scene:
        scan = self.scans[rec.location_id][rec.traversal_id][rec.scan_index]
        return Scene(rec.scene_id, rec.location_id, rec.traversal_id, scan.cloud, scan.pose,
                     tuple(scan.boxes) if with_labels else None)

    def scenes(self, with_labels: bool = True) -> list:
        return [self.scene(r, with_labels) for r in self.scene_records]

    def store(self, location_id: str, max_traversals: int = 5) -> TraversalStore:
        travs = self.scans[location_id]
        chosen = list(travs)[:max_traversals]
        return TraversalStore(
            location_id,
            {t: aggregate_scans([s.cloud for s in travs[t]], [s.pose for s in travs[t]]) for t in chosen},
        )

    def stores(self, max_traversals: int = 5) -> dict:
        return {lid: self.store(lid, max_traversals) for lid in sorted({r.location_id for r in self.scene_records})}

    def mask(self, scene_id: str):
        rec = next(r for r in self.scene_records if r.scene_id == scene_id)
        scan = self.scans[rec.location_id][rec.traversal_id][rec.scan_index]
        return scan.kinds, scan.object_ids

    def write(self, out_root) -> DatasetManifest:
        return write_dataset(self, out_root)


def _location_pose(world: WorldSpec, loc: int) -> Pose6DoF:
    rng = np.random.default_rng([world.seed, loc, 3])
    yaw = float(rng.uniform(-math.pi, math.pi))
    return Pose6DoF.from_yaw(yaw, (loc * 400.0, float(rng.uniform(-50, 50)), 0.0))


def _inset(o: Slab, d: float) -> Slab:
    size = tuple(max(v - 2 * d, 0.05) for v in o.size)
    return replace(o, size=size)


def _generate_traversal(world, shift, loc, trav, loc_pose, statics, static_patches, ground_patches, objs):
    obj_patch = [_slab_patches(_inset(o, world.surface_inset), 1.0) for o in objs]
    scans = []
    for k in range(world.scans_per_traversal):
        rng = np.random.default_rng([world.seed, loc, trav, 4, k])
        local_xy = np.array([k * world.scan_spacing, 0.0]) + rng.normal(0.0, world.pose_jitter, 2)
        local_yaw = float(rng.normal(0.0, 0.01))
        local_pose = Pose6DoF.from_yaw(local_yaw, (local_xy[0], local_xy[1], world.sensor_height))
        sensor = local_pose.translation
        chunks, kinds, oids = [], [], []
        go, gu, gv = ground_patches
        pts, _ = _sample_patches(rng, go, gu, gv, world.density * world.ground_density_factor, sensor, 0.0,
                                 world.max_range)
        pts[:, 2] += rng.normal(0.0, world.ground_noise, len(pts))
        chunks.append(pts)
        kinds.append(np.full(len(pts), GROUND))
        oids.append(np.full(len(pts), -1))
        so, su, sv = static_patches
        pts, _ = _sample_patches(rng, so, su, sv, world.density, sensor, 0.0, world.max_range)
        chunks.append(pts)
        kinds.append(np.full(len(pts), STATIC))
        oids.append(np.full(len(pts), -1))
        counts = []
        for o, (oo, ou, ov) in zip(objs, obj_patch):
            pts, _ = _sample_patches(rng, oo, ou, ov, world.density, sensor, 0.0, world.max_range)
            chunks.append(pts)
            kinds.append(np.full(len(pts), DYNAMIC))
            oids.append(np.full(len(pts), o.object_id))
            counts.append(len(pts))
        local = np.concatenate(chunks)
        local = local + rng.normal(0.0, world.sensor_noise, local.shape)
        pose = loc_pose.compose(local_pose)
        sensor_pts = local_pose.inverse().apply(local)
        boxes = []
        for o, n in zip(objs, counts):
            if n >= world.min_gt_points:
                boxes.append(_object_box(o, loc_pose))
        scans.append(Scan(PointCloud(sensor_pts, Frame.SENSOR), pose, np.concatenate(kinds).astype(np.int8),
                          np.concatenate(oids).astype(np.int64), boxes))
    return scans


def _object_box(o: Slab, loc_pose: Pose6DoF) -> LabeledBox:
    b = LabeledBox(o.center, o.size, o.yaw, o.cls, 1.0, Provenance.GROUND_TRUTH)
    return b.transformed(loc_pose)


def location_ids(world: WorldSpec) -> list:
    return [f"loc{g:03d}" for g in range(world.n_locations)]


def generate(world: WorldSpec, shift: Optional[DomainShiftSpec] = None, threads=None) -> SyntheticDataset:
    """Build a dataset in memory. Identical inputs give identical arrays."""
    scans = {}
    objects = {}
    records = []
    x0, x1, y0, y1 = world.extent
    gx = np.arange(x0, x1, world.ground_tile)
    gy = np.arange(y0, y1, world.ground_tile)
    gxx, gyy = np.meshgrid(gx, gy, indexing="ij")
    g_origin = np.column_stack([gxx.ravel(), gyy.ravel(), np.zeros(gxx.size)])
    g_u = np.repeat([[world.ground_tile, 0.0, 0.0]], len(g_origin), axis=0)
    g_v = np.repeat([[0.0, world.ground_tile, 0.0]], len(g_origin), axis=0)
    next_id = 0
    for g, lid in enumerate(location_ids(world)):
        loc_pose = _location_pose(world, g)
        statics = _static_structures(world, g)
        patches = [_slab_patches(s, 2.0) for s in statics]
        if patches:
            static_patches = tuple(np.concatenate([p[i] for p in patches]) for i in range(3))
        else:
            static_patches = (np.zeros((0, 3)),) * 3
        trav_objs = []
        placed = []
        for t in range(world.traversals):
            objs = _sample_objects(world, shift, g, t, statics, placed, next_id)
            next_id += len(objs)
            placed.extend(objs)
            trav_objs.append(objs)
        tids = [f"t{t:02d}" for t in range(world.traversals)]
        results = pmap(
            lambda t: _generate_traversal(world, shift, g, t, loc_pose, statics, static_patches,
                                          (g_origin, g_u, g_v), trav_objs[t]),
            range(world.traversals),
            threads,
        )
        scans[lid] = dict(zip(tids, results))
        objects[lid] = {tid: [_object_box(o, loc_pose) for o in objs] for tid, objs in zip(tids, trav_objs)}
        for tid in tids:
            for k in range(0, world.scans_per_traversal, world.scene_stride):
                records.append(SceneRecord(f"{lid}_{tid}_s{k:03d}", lid, tid, k, None))
    records.sort(key=lambda r: r.scene_id)
    return SyntheticDataset(world, shift, scans, records, objects)


def write_dataset(ds: SyntheticDataset, out_root):
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    locations = {}
    label_paths = {}
    scene_keys = {(r.location_id, r.traversal_id, r.scan_index) for r in ds.scene_records}
    for lid, travs in ds.scans.items():
        locations[lid] = {}
        for tid, scans in travs.items():
            d = out / lid / tid
            d.mkdir(parents=True, exist_ok=True)
            recs = []
            for k, scan in enumerate(scans):
                stem = f"{lid}/{tid}/scan_{k:03d}"
                write_xyz(out / f"{stem}.xyz", scan.cloud.points)
                write_pose(out / f"{stem}.pose.json", scan.pose)
                recs.append(ScanRecord(f"{stem}.xyz", f"{stem}.pose.json"))
                if (lid, tid, k) in scene_keys:
                    write_boxes(out / f"{stem}.boxes.json", scan.boxes)
                    write_masks(out / f"{stem}.mask.json", scan.kinds, scan.object_ids)
                    label_paths[(lid, tid, k)] = f"{stem}.boxes.json"
            locations[lid][tid] = recs
    records = [replace(r, labels=label_paths[(r.location_id, r.traversal_id, r.scan_index)]) for r in ds.scene_records]
    spec = {"world": asdict(ds.world), "shift": asdict(ds.shift) if ds.shift else None}
    (out / "world.json").write_text(json.dumps(spec, indent=1) + "\n", encoding="utf-8")
    write_manifest(out, locations, records)
    return load_manifest(out)


def generate_dataset(world: WorldSpec, shift: Optional[DomainShiftSpec], out_root, threads=None):
    """Generate and write a dataset in the ingest format; returns its manifest."""
    return write_dataset(generate(world, shift, threads), out_root)


def write_masks(path, kinds, object_ids) -> None:
    rows = []
    for k, o in zip(kinds.tolist(), object_ids.tolist()):
        rows.append({"kind": KIND_NAMES[k], "object": o} if k == DYNAMIC else {"kind": KIND_NAMES[k]})
    Path(path).write_text(json.dumps(rows, separators=(",", ":")) + "\n", encoding="utf-8")


def read_masks(path):
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    kinds = np.array([KIND_NAMES.index(r["kind"]) for r in rows], dtype=np.int8)
    oids = np.array([r.get("object", -1) for r in rows], dtype=np.int64)
    return kinds, oids


def oracle_masks(dataset) -> dict:
    """scene_id -> (kinds, object_ids) for an in-memory dataset or a written manifest."""
    if isinstance(dataset, SyntheticDataset):
        return {r.scene_id: dataset.mask(r.scene_id) for r in dataset.scene_records}
    out = {}
    for r in dataset.scenes:
        if r.labels is None:
            raise ValueError(f"scene {r.scene_id!r} has no labels, so no mask sidecar")
        out[r.scene_id] = read_masks(dataset.path(r.labels.replace(".boxes.json", ".mask.json")))
    return out
