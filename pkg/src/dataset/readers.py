"""
Readers for every on-disk format the pipeline consumes.

Each reader either returns fully validated domain objects or raises InputError
naming the file, the byte offset or line, and what was expected.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from src.detection.decode import rle_decode
from src.errors import InputError
from src.geometry.frames import orthonormalize
from src.models import (
    REGISTRY_FIELDS, DecodedFrameRecord, GroundTruthRecord, ManifestRecord,
    RawFrameRecord, RegistryRecord,
)
from src.types import (
    NUM_PROTOTYPES, PROTO_SIZE, Aabb3, Box2D, CameraModel, Detection2D,
    DetectionMode, Frame, FrameDetections, GroundTruthBox, ObjectSnapshot,
    PointCloud, Pose, PrototypeSet, RawDetection, RigidTransform, ScanEntry,
    SequenceManifest,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)

POINT_STRIDE = 16  # x, y, z, reflectance as float32
PROTOS_BYTES = NUM_PROTOTYPES * PROTO_SIZE * PROTO_SIZE * 4
CALIBRATION_ARITY = {"K": 4, "size": 2, "Tr": 12}


def _open_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise InputError(path, "file not found")
    except OSError as e:
        raise InputError(path, f"cannot read file: {e.strerror or e}")


def _open_text(path: Path) -> str:
    raw = _open_bytes(path)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise InputError(path, "not valid UTF-8 text", location=f"byte {e.start}")


def _data_lines(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Non-empty, non-comment lines as (1-based line number, tokens)."""
    for lineno, line in enumerate(_open_text(path).splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, stripped.split()


def _reals(path: Path, tokens: List[str], lineno: int) -> List[float]:
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise InputError(path, f"cannot parse numbers from {' '.join(tokens)!r}", location=f"line {lineno}")
    if not all(np.isfinite(values)):
        raise InputError(path, "non-finite number", location=f"line {lineno}", expected="finite reals")
    return values


def _load_json(path: Path):
    try:
        return json.loads(_open_text(path))
    except json.JSONDecodeError as e:
        raise InputError(path, f"invalid JSON: {e.msg}", location=f"line {e.lineno}")


def _validate(path: Path, model: Type[ModelT], data, location: Optional[str] = None) -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "record"
        where = f"{location}, {field}" if location else field
        raise InputError(path, first["msg"], location=where, expected=f"{model.__name__} schema")


# ── Scans ────────────────────────────────────────────────────────────────────

def read_scan(path: PathLike) -> PointCloud:
    """KITTI velodyne binary: float32 LE (x, y, z, reflectance) records, reflectance dropped."""
    path = Path(path)
    raw = _open_bytes(path)
    usable = len(raw) - len(raw) % POINT_STRIDE
    if usable != len(raw):
        raise InputError(
            path, f"truncated at byte {usable}", location=f"byte {usable}",
            expected=f"a length divisible by {POINT_STRIDE}",
        )
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    points = records[:, :3].astype(np.float64)
    finite = np.all(np.isfinite(points), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        logger.warning(f"{path}: dropped {dropped} point(s) with NaN or infinite coordinates")
        points = points[finite]
    return PointCloud(points, Frame.LIDAR)


# ── Calibration and poses ────────────────────────────────────────────────────

def _rotation(path: Path, values: List[float], lineno: int) -> Tuple[np.ndarray, np.ndarray]:
    m = np.asarray(values, dtype=np.float64).reshape(3, 4)
    try:
        rot = orthonormalize(m[:, :3])
    except ValueError as e:
        raise InputError(path, str(e), location=f"line {lineno}", expected="a proper rotation")
    return rot, m[:, 3]


def read_calibration(path: PathLike) -> CameraModel:
    """Native calibration: `K: fx fy cx cy`, `size: width height`, `Tr: <3x4 row-major>`."""
    path = Path(path)
    found: Dict[str, Tuple[int, List[float]]] = {}
    for lineno, tokens in _data_lines(path):
        key = tokens[0].rstrip(":")
        if key not in CALIBRATION_ARITY:
            logger.debug(f"{path}: ignoring unknown key {key!r} on line {lineno}")
            continue
        if key in found:
            raise InputError(path, f"duplicate key {key!r}", location=f"line {lineno}")
        values = _reals(path, tokens[1:], lineno)
        if len(values) != CALIBRATION_ARITY[key]:
            raise InputError(
                path, f"{key} has {len(values)} value(s)", location=f"line {lineno}",
                expected=f"{CALIBRATION_ARITY[key]} reals",
            )
        found[key] = (lineno, values)

    for key in CALIBRATION_ARITY:
        if key not in found:
            raise InputError(path, f"missing key {key!r}", expected="K, size and Tr lines")

    k_line, (fx, fy, cx, cy) = found["K"]
    size_line, (width, height) = found["size"]
    tr_line, tr = found["Tr"]
    if width != int(width) or height != int(height):
        raise InputError(path, "image size must be integral", location=f"line {size_line}")
    rot, trans = _rotation(path, tr, tr_line)
    try:
        return CameraModel(
            fx=fx, fy=fy, cx=cx, cy=cy, width=int(width), height=int(height),
            extrinsics=RigidTransform(rot, trans, Frame.LIDAR, Frame.CAMERA),
        )
    except ValueError as e:
        raise InputError(path, str(e), location=f"line {k_line}")


def read_poses(path: PathLike) -> List[Pose]:
    """KITTI odometry poses: line i holds the row-major 3x4 T_WL of scan i."""
    path = Path(path)
    poses = []
    for lineno, tokens in _data_lines(path):
        values = _reals(path, tokens, lineno)
        if len(values) != 12:
            raise InputError(path, f"pose has {len(values)} value(s)", location=f"line {lineno}", expected="12 reals")
        rot, trans = _rotation(path, values, lineno)
        poses.append(Pose(scan_id=len(poses), T_WL=RigidTransform(rot, trans, Frame.LIDAR, Frame.WORLD)))
    return poses


# ── Detection records ────────────────────────────────────────────────────────

def default_protos_path(detections_path: PathLike) -> Path:
    return Path(detections_path).with_suffix(".protos.bin")


def read_prototypes(path: PathLike) -> PrototypeSet:
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) != PROTOS_BYTES:
        raise InputError(
            path, f"prototype blob is {len(raw)} bytes",
            expected=f"exactly {PROTOS_BYTES} bytes ({NUM_PROTOTYPES}x{PROTO_SIZE}x{PROTO_SIZE} float32)",
        )
    maps = np.frombuffer(raw, dtype="<f4").reshape(NUM_PROTOTYPES, PROTO_SIZE, PROTO_SIZE)
    return PrototypeSet(maps.astype(np.float64))


def read_detections(
    path: PathLike,
    mode: DetectionMode = DetectionMode.DECODED,
    protos_path: Optional[PathLike] = None,
    width: Optional[int] = None,
    height: Optional[int] = None,
) -> FrameDetections:
    """One frame of detector output.

    Raw records come with their prototype blob (default `<record>.protos.bin`).
    Decoded records carry RLE masks, expanded and checked against the frame size.
    When `width`/`height` are given the record must declare the same frame.
    """
    path = Path(path)
    mode = DetectionMode(mode)
    data = _load_json(path)
    model = RawFrameRecord if mode == DetectionMode.RAW else DecodedFrameRecord
    record = _validate(path, model, data)
    if (width is not None and record.width != width) or (height is not None and record.height != height):
        raise InputError(
            path, f"record frame is {record.width}x{record.height}",
            expected=f"{width}x{height} as declared for the sequence",
        )

    if mode == DetectionMode.RAW:
        protos = read_prototypes(protos_path if protos_path else default_protos_path(path))
        raw = [
            RawDetection(d.cx, d.cy, d.w, d.h, np.asarray(d.class_confidences), np.asarray(d.mask_weights))
            for d in record.detections
        ]
        return FrameDetections(record.width, record.height, mode, raw=raw, protos=protos)

    decoded = []
    for i, d in enumerate(record.detections):
        mask = rle_decode(d.rle, record.width, record.height)
        if mask is None:
            raise InputError(
                path, f"RLE runs sum to {sum(d.rle)}", location=f"detections.{i}.rle",
                expected=f"{record.width * record.height} (width x height)",
            )
        x1, y1, x2, y2 = d.box
        if x1 > x2 or y1 > y2:
            raise InputError(
                path, f"box corners are inverted: {d.box}", location=f"detections.{i}.box",
                expected="[x1, y1, x2, y2] with x1 <= x2 and y1 <= y2",
            )
        box = Box2D(x1, y1, x2, y2).clamp(record.width, record.height)
        decoded.append(Detection2D(box, d.class_id, d.confidence, mask))
    return FrameDetections(record.width, record.height, mode, decoded=decoded)


# ── Sequence manifest and ground truth ───────────────────────────────────────

def _resolve(base: Path, manifest_path: Path, relative: str, what: str) -> Path:
    resolved = (base / relative).resolve()
    if not resolved.exists():
        raise InputError(manifest_path, f"{what} {relative!r} does not exist", expected="an existing path")
    return resolved


def read_manifest(path: PathLike) -> SequenceManifest:
    path = Path(path)
    record = _validate(path, ManifestRecord, _load_json(path))
    base = path.parent
    mode = DetectionMode(record.detection_mode)

    scans = []
    for s in record.scans:
        detections = protos = None
        if s.detections is not None:
            detections = _resolve(base, path, s.detections, f"scan {s.scan_id} detections")
            if mode == DetectionMode.RAW:
                blob = s.protos if s.protos is not None else default_protos_path(s.detections)
                protos = _resolve(base, path, str(blob), f"scan {s.scan_id} prototypes")
        scans.append(ScanEntry(
            scan_id=s.scan_id,
            scan_path=_resolve(base, path, s.scan, f"scan {s.scan_id}"),
            detections_path=detections,
            protos_path=protos,
            pose_index=s.pose_index,
        ))

    return SequenceManifest(
        scans=scans,
        calibration_path=_resolve(base, path, record.calibration, "calibration"),
        poses_path=_resolve(base, path, record.poses, "poses"),
        width=record.width,
        height=record.height,
        detection_mode=mode,
        ground_truth_path=(
            _resolve(base, path, record.ground_truth, "ground truth") if record.ground_truth else None
        ),
    )


def read_ground_truth(path: PathLike) -> List[GroundTruthBox]:
    """JSON lines, one box per line; a null scan_id marks a whole-sequence box in frame W."""
    path = Path(path)
    boxes = []
    for lineno, line in enumerate(_open_text(path).splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise InputError(path, f"invalid JSON: {e.msg}", location=f"line {lineno}")
        rec = _validate(path, GroundTruthRecord, data, location=f"line {lineno}")
        boxes.append(GroundTruthBox(rec.class_id, Aabb3(rec.min, rec.max, Frame.WORLD), rec.scan_id))
    return boxes


# ── Registry export and class tables ─────────────────────────────────────────

def read_registry(path: PathLike) -> Tuple[List[RegistryRecord], Dict]:
    """Registry CSV back into records plus the `# config:` provenance dump (empty if absent)."""
    path = Path(path)
    provenance: Dict = {}
    rows: List[str] = []
    for lineno, line in enumerate(_open_text(path).splitlines(), start=1):
        if line.startswith("# config:"):
            try:
                provenance = json.loads(line[len("# config:"):])
            except json.JSONDecodeError as e:
                raise InputError(path, f"invalid provenance JSON: {e.msg}", location=f"line {lineno}")
        elif line.strip() and not line.startswith("#"):
            rows.append(line)
    if not rows:
        raise InputError(path, "no header row", expected=",".join(REGISTRY_FIELDS))

    reader = csv.DictReader(rows)
    if reader.fieldnames != REGISTRY_FIELDS:
        raise InputError(path, f"header is {reader.fieldnames}", expected=",".join(REGISTRY_FIELDS))
    records = [
        _validate(path, RegistryRecord, row, location=f"record {i + 1}")
        for i, row in enumerate(reader)
    ]
    return records, provenance


def snapshot_from_record(rec: RegistryRecord) -> ObjectSnapshot:
    return ObjectSnapshot(
        object_id=rec.object_id,
        class_id=rec.class_id,
        box=Aabb3([rec.min_x, rec.min_y, rec.min_z], [rec.max_x, rec.max_y, rec.max_z], Frame.WORLD),
        centroid=np.array([rec.centroid_x, rec.centroid_y, rec.centroid_z]),
        observation_count=rec.observation_count,
        point_count=rec.point_count,
        best_confidence=rec.best_confidence,
    )


def read_class_names(path: PathLike) -> List[str]:
    """One class name per line, line order is the class id."""
    path = Path(path)
    names = [line.strip() for line in _open_text(path).splitlines() if line.strip()]
    if not names:
        raise InputError(path, "no class names", expected="one name per line")
    return names


def read_class_map(path: PathLike) -> Dict[int, int]:
    """JSON object mapping detector class ids to ground-truth class ids."""
    path = Path(path)
    data = _load_json(path)
    if not isinstance(data, dict):
        raise InputError(path, "class map is not a JSON object", expected='{"detector_id": gt_class_id}')
    try:
        return {int(k): int(v) for k, v in data.items()}
    except (TypeError, ValueError):
        raise InputError(path, "class map keys and values must be integers")
