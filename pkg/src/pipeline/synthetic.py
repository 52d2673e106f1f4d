"""
Synthetic sequences with known ground truth.

Static axis-aligned cuboids are sampled on their surfaces, seen from a sensor
moving along +x, and written in every dataset format together with detector
records whose masks are the image rectangles around each visible object.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.dataset.writers import (
    write_calibration, write_decoded_detections, write_ground_truth,
    write_manifest, write_poses, write_raw_detections, write_scan,
)
from src.errors import ConfigError
from src.geometry.frames import project_points, yaw_transform
from src.models import ManifestRecord, ScanRecord
from src.types import (
    NUM_CLASSES, NUM_PROTOTYPES, PROTO_SIZE, Aabb3, BinaryMask, Box2D,
    CameraModel, Detection2D, Frame, GroundTruthBox, Pose, PrototypeSet,
    RawDetection, RigidTransform,
)

logger = logging.getLogger(__name__)

# LiDAR x forward, y left, z up; camera x right, y down, z forward
LIDAR_TO_CAMERA = np.array([
    [0.0, -1.0, 0.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
])
DETECTION_CONFIDENCE = 0.9
MASK_LOGIT = 8.0
MASK_MARGIN_PX = 1


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_objects: int = Field(3, ge=0)
    num_scans: int = Field(10, ge=1)
    class_id: int = Field(2, ge=0, lt=NUM_CLASSES)
    object_size: Tuple[float, float, float] = (4.0, 1.8, 1.5)
    first_row_x: float = 15.0
    row_spacing: float = Field(7.0, gt=0.0)
    lateral_spacing: float = Field(4.0, gt=0.0)
    objects_per_row: int = Field(3, ge=1)
    ground_z: float = -1.0
    position_jitter: float = Field(0.0, ge=0.0)

    step: float = 0.5            # sensor travel along +x per scan, meters
    yaw_rate: float = 0.0        # radians per scan
    sample_spacing: float = Field(0.1, gt=0.0)
    noise_sigma: float = Field(0.0, ge=0.0)

    dropout: float = Field(0.0, ge=0.0, le=1.0)          # fraction of scans without a detector record
    dropout_scans: Optional[List[int]] = None            # explicit choice, overrides `dropout`
    undetected_objects: List[int] = Field(default_factory=list)
    mask_coverage: float = Field(1.0, gt=0.0, le=1.0)    # area fraction of the object rectangle kept
    detection_mode: Literal["decoded", "raw"] = "decoded"
    per_scan_ground_truth: bool = False

    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)
    focal: float = Field(500.0, gt=0.0)
    seed: int = 0

    @classmethod
    def parse(cls, values: dict) -> "SyntheticSpec":
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise ConfigError(str(e)) from e


@dataclass
class SyntheticSequence:
    manifest_path: Path
    ground_truth: List[GroundTruthBox]
    dropped_scans: List[int]
    camera: CameraModel
    poses: List[Pose] = field(default_factory=list)


def synthetic_camera(spec: SyntheticSpec) -> CameraModel:
    return CameraModel(
        fx=spec.focal, fy=spec.focal, cx=spec.width / 2.0, cy=spec.height / 2.0,
        width=spec.width, height=spec.height,
        extrinsics=RigidTransform(LIDAR_TO_CAMERA, np.zeros(3), Frame.LIDAR, Frame.CAMERA),
    )


def object_boxes(spec: SyntheticSpec, rng: np.random.Generator) -> List[Aabb3]:
    size = np.asarray(spec.object_size)
    boxes = []
    for k in range(spec.num_objects):
        row, col = divmod(k, spec.objects_per_row)
        center = np.array([
            spec.first_row_x + row * spec.row_spacing,
            (col - (spec.objects_per_row - 1) / 2.0) * spec.lateral_spacing,
            spec.ground_z + size[2] / 2.0,
        ])
        if spec.position_jitter:
            center[:2] += rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
        boxes.append(Aabb3(center - size / 2.0, center + size / 2.0, Frame.WORLD))
    return boxes


def _axis_samples(length: float, spacing: float, rng: np.random.Generator) -> np.ndarray:
    """Jittered grid on [0, length] whose two end samples sit exactly on the edges."""
    n = max(2, int(np.ceil(length / spacing)) + 1)
    grid = np.linspace(0.0, length, n)
    step = length / (n - 1)
    grid[1:-1] += rng.uniform(-0.3 * step, 0.3 * step, size=n - 2)
    return grid


def sample_surface(box: Aabb3, spacing: float, rng: np.random.Generator) -> np.ndarray:
    """Points on all six faces of a box, edges included."""
    lo, hi = box.min_corner, box.max_corner
    ext = hi - lo
    faces = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        for side in (lo[axis], hi[axis]):
            ua = _axis_samples(ext[a], spacing, rng)
            ub = _axis_samples(ext[b], spacing, rng)
            ga, gb = np.meshgrid(ua, ub, indexing="ij")
            face = np.empty((ga.size, 3))
            face[:, axis] = side
            face[:, a] = lo[a] + ga.reshape(-1)
            face[:, b] = lo[b] + gb.reshape(-1)
            faces.append(face)
    return np.vstack(faces)


def sensor_poses(spec: SyntheticSpec) -> List[Pose]:
    return [
        Pose(scan_id=i, T_WL=yaw_transform(i * spec.yaw_rate, (i * spec.step, 0.0, 0.0)))
        for i in range(spec.num_scans)
    ]


def mask_rectangle(
    points_l: np.ndarray, cam: CameraModel, coverage: float = 1.0
) -> Optional[Tuple[int, int, int, int]]:
    """Inclusive pixel rectangle (c0, r0, c1, r1) around the visible projections, None if off-image."""
    uv, valid = project_points(points_l, cam)
    if not np.any(valid):
        return None
    px = np.floor(uv[valid] + 0.5)
    inside = (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)
    if not np.any(inside):
        return None
    px = px[inside]
    c0, r0 = px.min(axis=0) - MASK_MARGIN_PX
    c1, r1 = px.max(axis=0) + MASK_MARGIN_PX
    if coverage < 1.0:
        shrink = np.sqrt(coverage)
        cc, rc = (c0 + c1) / 2.0, (r0 + r1) / 2.0
        hw, hh = (c1 - c0) / 2.0 * shrink, (r1 - r0) / 2.0 * shrink
        c0, c1, r0, r1 = np.ceil(cc - hw), np.floor(cc + hw), np.ceil(rc - hh), np.floor(rc + hh)
    c0, r0 = max(int(c0), 0), max(int(r0), 0)
    c1, r1 = min(int(c1), cam.width - 1), min(int(r1), cam.height - 1)
    if c1 < c0 or r1 < r0:
        return None
    return c0, r0, c1, r1


def rectangle_detection(rect: Tuple[int, int, int, int], cam: CameraModel, class_id: int) -> Detection2D:
    c0, r0, c1, r1 = rect
    data = np.zeros((cam.height, cam.width), dtype=bool)
    data[r0:r1 + 1, c0:c1 + 1] = True
    box = Box2D(float(c0), float(r0), float(c1 + 1), float(r1 + 1))
    return Detection2D(box=box, class_id=class_id, confidence=DETECTION_CONFIDENCE, mask=BinaryMask(data))


def rectangle_raw_detection(rect: Tuple[int, int, int, int], class_id: int) -> RawDetection:
    c0, r0, c1, r1 = rect
    conf = np.zeros(NUM_CLASSES)
    conf[class_id] = DETECTION_CONFIDENCE
    weights = np.zeros(NUM_PROTOTYPES)
    weights[0] = 1.0
    w, h = c1 + 1 - c0, r1 + 1 - r0
    return RawDetection(c0 + w / 2.0, r0 + h / 2.0, float(w), float(h), conf, weights)


def constant_prototypes() -> PrototypeSet:
    """Prototype 0 saturates the sigmoid everywhere, so a raw mask is exactly its box."""
    maps = np.zeros((NUM_PROTOTYPES, PROTO_SIZE, PROTO_SIZE))
    maps[0] = MASK_LOGIT
    return PrototypeSet(maps)


def _dropped_scans(spec: SyntheticSpec, rng: np.random.Generator) -> List[int]:
    if spec.dropout_scans is not None:
        return sorted(i for i in set(spec.dropout_scans) if 0 <= i < spec.num_scans)
    count = int(round(spec.dropout * spec.num_scans))
    return sorted(int(i) for i in rng.choice(spec.num_scans, size=count, replace=False))


def generate_synthetic_sequence(spec: SyntheticSpec, out_dir: Union[str, Path]) -> SyntheticSequence:
    """Write a complete sequence under `out_dir`; an equal SyntheticSpec always gives the same bytes."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    cam = synthetic_camera(spec)
    boxes = object_boxes(spec, rng)
    poses = sensor_poses(spec)
    dropped = _dropped_scans(spec, rng)
    undetected = set(spec.undetected_objects)
    protos = constant_prototypes() if spec.detection_mode == "raw" else None

    write_calibration(cam, out_dir / "calib.txt")
    write_poses(poses, out_dir / "poses.txt")

    ground_truth = [GroundTruthBox(spec.class_id, box, None) for box in boxes]
    ever_visible = [False] * len(boxes)
    scans: List[ScanRecord] = []
    for i, pose in enumerate(poses):
        to_lidar = pose.T_WL.inverse()
        chunks, detections = [], []
        for k, box in enumerate(boxes):
            pts_l = to_lidar.apply(sample_surface(box, spec.sample_spacing, rng))
            if spec.noise_sigma:
                pts_l = pts_l + rng.normal(0.0, spec.noise_sigma, size=pts_l.shape)
            chunks.append(pts_l)
            rect = mask_rectangle(pts_l, cam, spec.mask_coverage)
            if rect is None:
                continue
            ever_visible[k] = True
            if spec.per_scan_ground_truth:
                ground_truth.append(GroundTruthBox(spec.class_id, box, i))
            if k not in undetected:
                detections.append(rect)

        scan_name = f"scans/{i:06d}.bin"
        write_scan(np.vstack(chunks) if chunks else np.zeros((0, 3)), out_dir / scan_name)

        det_name = None
        if i not in dropped:
            det_name = f"detections/{i:06d}.json"
            if protos is not None:
                raw = [rectangle_raw_detection(r, spec.class_id) for r in detections]
                write_raw_detections(raw, protos, cam.width, cam.height, out_dir / det_name)
            else:
                decoded = [rectangle_detection(r, cam, spec.class_id) for r in detections]
                write_decoded_detections(decoded, cam.width, cam.height, out_dir / det_name)
        scans.append(ScanRecord(scan_id=i, scan=scan_name, detections=det_name, protos=None, pose_index=i))

    for k, seen in enumerate(ever_visible):
        if not seen:
            logger.warning(f"object {k} never enters the camera frustum; it cannot be detected")
    if len(dropped) == spec.num_scans:
        logger.warning("every scan has its detections dropped; the registry will stay empty")

    write_ground_truth(ground_truth, out_dir / "gt.jsonl")
    manifest_path = write_manifest(
        ManifestRecord(
            calibration="calib.txt",
            poses="poses.txt",
            width=cam.width,
            height=cam.height,
            detection_mode=spec.detection_mode,
            ground_truth="gt.jsonl",
            scans=scans,
        ),
        out_dir / "manifest.json",
    )
    logger.info(
        f"synthetic sequence: {spec.num_scans} scans, {len(boxes)} objects, "
        f"{len(dropped)} dropped scan(s) -> {manifest_path}"
    )
    return SyntheticSequence(manifest_path, ground_truth, dropped, cam, poses)
