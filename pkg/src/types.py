from enum import Enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, List, Dict, NamedTuple

import numpy as np


NUM_CLASSES = 80
NUM_PROTOTYPES = 32
PROTO_SIZE = 160


class Frame(str, Enum):
    LIDAR = "L"
    CAMERA = "C"
    WORLD = "W"


class OverlapMetric(str, Enum):
    IOU = "iou"
    MIN_RATIO = "min_ratio"


class DetectionMode(str, Enum):
    RAW = "raw"
    DECODED = "decoded"


class DetectionCategory(str, Enum):
    DETECTED = "detected"
    PARTIAL = "partial"    # matched box encloses < 50% of the ground truth volume
    MISSED = "missed"


class Pixel(NamedTuple):
    u: float
    v: float


# ── Geometry ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray     # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,) meters
    source: Frame = Frame.LIDAR
    target: Frame = Frame.WORLD

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("rigid transform has non-finite entries")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("improper rotation (determinant != +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls, source: Frame = Frame.LIDAR, target: Frame = Frame.WORLD) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), source, target)

    @classmethod
    def from_matrix(
        cls, matrix: np.ndarray, source: Frame = Frame.LIDAR, target: Frame = Frame.WORLD
    ) -> "RigidTransform":
        """Build from a 3x4 [R|t] or 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], source, target)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(rot_t, -rot_t @ self.translation, self.target, self.source)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first, then `self`."""
        if other.target != self.source:
            raise ValueError(
                f"cannot compose {other.source.value}->{other.target.value} "
                f"with {self.source.value}->{self.target.value}"
            )
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.source,
            self.target,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform  # LiDAR -> camera

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    frame: Frame = Frame.LIDAR

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frame == Frame.CAMERA:
            raise ValueError("point clouds live in frame L or W, never C")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame: Frame = Frame.LIDAR) -> "PointCloud":
        return cls(np.zeros((0, 3)), frame)


@dataclass(frozen=True)
class Aabb3:
    min_corner: np.ndarray
    max_corner: np.ndarray
    frame: Frame = Frame.LIDAR

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"box min {lo.tolist()} exceeds max {hi.tolist()}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def center(self) -> np.ndarray:
        return (self.min_corner + self.max_corner) / 2.0

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def corners(self) -> np.ndarray:
        lo, hi = self.min_corner, self.max_corner
        return np.array([
            [x, y, z]
            for x in (lo[0], hi[0])
            for y in (lo[1], hi[1])
            for z in (lo[2], hi[2])
        ])

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((pts >= self.min_corner) & (pts <= self.max_corner), axis=1)


# ── 2D detections ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box2D":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    def clamp(self, width: int, height: int) -> "Box2D":
        return Box2D(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class RawDetection:
    cx: float
    cy: float
    width: float
    height: float
    class_confidences: np.ndarray  # (80,)
    mask_weights: np.ndarray       # (32,)

    def __post_init__(self):
        conf = np.asarray(self.class_confidences, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.mask_weights, dtype=np.float64).reshape(-1)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"raw detection needs positive size, got {self.width}x{self.height}")
        if conf.shape[0] != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} class confidences, got {conf.shape[0]}")
        if weights.shape[0] != NUM_PROTOTYPES:
            raise ValueError(f"expected {NUM_PROTOTYPES} mask weights, got {weights.shape[0]}")
        object.__setattr__(self, "class_confidences", conf)
        object.__setattr__(self, "mask_weights", weights)

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_confidences))

    @property
    def score(self) -> float:
        return float(self.class_confidences[self.class_id])

    @property
    def box(self) -> Box2D:
        return Box2D.from_center(self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class PrototypeSet:
    maps: np.ndarray  # (32, H, W); 160x160 for detector dumps

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 3 or maps.shape[0] != NUM_PROTOTYPES:
            raise ValueError(f"expected {NUM_PROTOTYPES} prototype maps, got shape {maps.shape}")
        object.__setattr__(self, "maps", maps)

    @property
    def grid_shape(self) -> tuple:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray  # (height, width) bool, row-major

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=bool))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class Detection2D:
    box: Box2D
    class_id: int
    confidence: float
    mask: BinaryMask


@dataclass
class FrameDetections:
    """One detector record as read from disk, either still raw or already decoded."""
    width: int
    height: int
    mode: DetectionMode
    raw: List[RawDetection] = field(default_factory=list)
    protos: Optional[PrototypeSet] = None
    decoded: List[Detection2D] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.raw) if self.mode == DetectionMode.RAW else len(self.decoded)


# ── Layers ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Cluster:
    points: np.ndarray             # (N, 3)
    frame: Frame
    class_id: int
    confidence: float
    indices: Optional[np.ndarray] = None  # into the source cloud; None once points come from several sources

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("empty cluster")
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
            if idx.shape[0] != pts.shape[0]:
                raise ValueError("cluster indices do not match its points")
            object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class ScanDetections:
    scan_id: int
    clusters: List[Cluster] = field(default_factory=list)
    boxes: List[Aabb3] = field(default_factory=list)
    frame: Frame = Frame.LIDAR


@dataclass(frozen=True)
class Pose:
    scan_id: int
    T_WL: RigidTransform


@dataclass
class ObjectInstance:
    object_id: int
    class_id: int
    best_confidence: float
    cluster: Cluster
    box: Aabb3
    observation_count: int = 1
    last_seen_scan: int = 0
    map_indices: Optional[np.ndarray] = None  # global map points of the refined cluster

    @property
    def centroid(self) -> np.ndarray:
        return self.cluster.points.mean(axis=0)


@dataclass(frozen=True)
class ObjectSnapshot:
    object_id: int
    class_id: int
    box: Aabb3
    centroid: np.ndarray
    observation_count: int
    point_count: int = 0
    best_confidence: float = 0.0


# ── Dataset / evaluation ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class ScanEntry:
    scan_id: int
    scan_path: Path
    detections_path: Optional[Path]
    protos_path: Optional[Path]
    pose_index: int


@dataclass
class SequenceManifest:
    scans: List[ScanEntry]
    calibration_path: Path
    poses_path: Path
    width: int
    height: int
    detection_mode: DetectionMode = DetectionMode.DECODED
    ground_truth_path: Optional[Path] = None


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: Aabb3
    scan_id: Optional[int] = None  # None = global box

    @property
    def is_global(self) -> bool:
        return self.scan_id is None


@dataclass
class ClassScore:
    class_id: int
    class_name: str
    iou: float             # mean over ground-truth boxes of the class
    gt_count: int
    matched: int
    detected: int = 0
    partial: int = 0
    missed: int = 0


@dataclass
class LayerTiming:
    layer1_ms: List[float] = field(default_factory=list)
    layer2_ms: List[float] = field(default_factory=list)
    layer3_ms: List[float] = field(default_factory=list)
    total_ms: List[float] = field(default_factory=list)

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for name in ("layer1", "layer2", "layer3", "total"):
            vals = getattr(self, f"{name}_ms")
            out[name] = {
                "mean_ms": float(np.mean(vals)) if vals else 0.0,
                "max_ms": float(np.max(vals)) if vals else 0.0,
            }
        return out


@dataclass
class EvalReport:
    class_scores: List[ClassScore]
    miou: float  # percentage, 0-100
    matched: int
    unmatched_gt: int
    unmatched_pred: int
    category_counts: Dict[str, int] = field(default_factory=dict)
    timing: Optional[LayerTiming] = None

