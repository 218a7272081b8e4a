"""Geometric and label types shared across the pipeline.

Clouds are stored as ``(n, 3)`` float64 arrays rather than lists of point
objects; a single point is any length-3 sequence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")
NUM_CLASSES = len(CLASS_NAMES)

ORTHO_TOL = 1e-9


def class_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown class name {name!r}; expected one of {CLASS_NAMES}") from None


class Frame(str, enum.Enum):
    SENSOR = "sensor"
    WORLD = "world"


class Provenance(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO_LABEL = "pseudo_label"
    DETECTION = "detection"


class LabelSource(str, enum.Enum):
    FROM_BOXES = "from_boxes"
    REWRITTEN_FBS = "rewritten_fbs"


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose6DoF:
    """Rigid transform mapping sensor coordinates to world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and 3-vector translation, got {r.shape} and {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL or np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise ValueError("pose rotation is not orthonormal with det 1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @classmethod
    def identity(cls) -> "Pose6DoF":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float]) -> "Pose6DoF":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    def inverse(self) -> "Pose6DoF":
        rt = self.rotation.T
        return Pose6DoF(rt, -rt @ self.translation)

    def compose(self, other: "Pose6DoF") -> "Pose6DoF":
        """``self ∘ other``: apply ``other`` first."""
        return Pose6DoF(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def __eq__(self, other):
        if not isinstance(other, Pose6DoF):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: Frame = Frame.SENSOR

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argmax(~np.all(np.isfinite(pts), axis=1)))
            raise ValueError(f"point cloud has a non-finite coordinate at index {bad}")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "frame", Frame(self.frame))

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame == other.frame and np.array_equal(self.points, other.points)

    __hash__ = None


def transform_cloud(cloud: PointCloud, pose: Pose6DoF) -> PointCloud:
    """Map a sensor-frame cloud into the world frame."""
    if cloud.frame != Frame.SENSOR:
        raise ValueError("transform_cloud expects a sensor-frame cloud")
    if not isinstance(pose, Pose6DoF):
        pose = Pose6DoF(*pose)
    return PointCloud(pose.apply(cloud.points), Frame.WORLD)


def to_sensor_frame(cloud: PointCloud, pose: Pose6DoF) -> PointCloud:
    if cloud.frame != Frame.WORLD:
        raise ValueError("to_sensor_frame expects a world-frame cloud")
    return PointCloud(pose.inverse().apply(cloud.points), Frame.SENSOR)


@dataclass(frozen=True)
class LabeledBox:
    """Oriented 3D box. ``yaw`` rotates the length axis about +z."""

    center: tuple
    size: tuple
    yaw: float
    cls: int
    confidence: float = 1.0
    provenance: Provenance = Provenance.GROUND_TRUTH

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("box center and size must have three components")
        if not all(math.isfinite(v) for v in center + size) or not math.isfinite(self.yaw):
            raise ValueError("box has non-finite geometry")
        if min(size) <= 0.0:
            raise ValueError(f"box size components must be > 0, got {size}")
        if not 0 <= int(self.cls) < NUM_CLASSES:
            raise ValueError(f"class id {self.cls} out of range")
        prov = Provenance(self.provenance)
        conf = float(self.confidence)
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence {conf} outside [0, 1]")
        if prov == Provenance.GROUND_TRUTH and conf != 1.0:
            raise ValueError("ground-truth boxes must have confidence 1")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "cls", int(self.cls))
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "provenance", prov)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.cls]

    def with_provenance(self, provenance: Provenance, confidence: Optional[float] = None) -> "LabeledBox":
        return replace(self, provenance=provenance, confidence=self.confidence if confidence is None else confidence)

    def transformed(self, pose: Pose6DoF) -> "LabeledBox":
        """Apply a rigid transform; only the yaw part of the rotation is kept."""
        c = pose.apply(np.asarray(self.center))
        return replace(self, center=tuple(c), yaw=self.yaw + pose.yaw)

    def bev_corners(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        l, w, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-l, -w], [l, -w], [l, w], [-l, w]]) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def corners(self) -> np.ndarray:
        bev = self.bev_corners()
        z0 = self.center[2] - self.size[2] / 2
        z1 = self.center[2] + self.size[2] / 2
        return np.vstack([np.column_stack([bev, np.full(4, z0)]), np.column_stack([bev, np.full(4, z1)])])


def points_in_box(box: LabeledBox, points: np.ndarray) -> np.ndarray:
    """Boolean mask of the points lying inside ``box`` (faces inclusive)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = pts - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    l, w, h = box.size
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)


def box_contains(box: LabeledBox, p: Sequence[float]) -> bool:
    return bool(points_in_box(box, np.asarray(p, dtype=np.float64))[0])


@dataclass(frozen=True, eq=False)
class PointLabelSet:
    """Per-point multi-hot class targets, shape (n, NUM_CLASSES), dtype uint8."""

    labels: np.ndarray
    source: LabelSource = LabelSource.FROM_BOXES

    def __post_init__(self):
        y = np.asarray(self.labels)
        if y.ndim != 2 or y.shape[1] != NUM_CLASSES:
            raise ValueError(f"labels must have shape (n, {NUM_CLASSES}), got {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("label entries must be binary")
        object.__setattr__(self, "labels", _readonly(y.astype(np.uint8)))
        object.__setattr__(self, "source", LabelSource(self.source))

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointLabelSet):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    location_id: str
    traversal_id: str
    cloud: PointCloud
    sensor_pose: Pose6DoF
    gt_boxes: Optional[tuple] = None
    _world: Optional[PointCloud] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.cloud.frame != Frame.SENSOR:
            raise ValueError("scene clouds are stored in the sensor frame")
        if self.gt_boxes is not None:
            object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))

    def world_cloud(self) -> PointCloud:
        if self._world is None:
            object.__setattr__(self, "_world", transform_cloud(self.cloud, self.sensor_pose))
        return self._world

    def without_labels(self) -> "Scene":
        return Scene(self.scene_id, self.location_id, self.traversal_id, self.cloud, self.sensor_pose, None, self._world)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            (self.scene_id, self.location_id, self.traversal_id, self.gt_boxes)
            == (other.scene_id, other.location_id, other.traversal_id, other.gt_boxes)
            and self.cloud == other.cloud
            and self.sensor_pose == other.sensor_pose
        )

    __hash__ = None
