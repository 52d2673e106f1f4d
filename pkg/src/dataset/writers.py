"""
Writers for every format the pipeline produces or the fixture generator emits.

Output is deterministic: fixed field order, fixed precision, sorted JSON keys
and no timestamps, so identical inputs give byte-identical files.
"""

import csv
import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.detection.decode import rle_encode
from src.models import (
    EXPORT_PRECISION, REGISTRY_FIELDS, DecodedDetectionRecord, DecodedFrameRecord,
    GroundTruthRecord, ManifestRecord, RawDetectionRecord, RawFrameRecord,
    RegistryRecord, class_name,
)
from src.types import (
    CameraModel, Detection2D, EvalReport, GroundTruthBox, ObjectInstance,
    ObjectSnapshot, Pose, PrototypeSet, RawDetection,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Color = Tuple[int, int, int]

BACKGROUND_COLOR: Color = (255, 255, 255)


def _fmt(value: float) -> str:
    return f"{value:.{EXPORT_PRECISION}f}"


def _write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {path}: {e.strerror}", str(path)) from e
    return path


def _write_text(path: PathLike, text: str) -> Path:
    return _write_bytes(path, text.encode("utf-8"))


def _dump_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def provenance_line(provenance: Optional[Dict[str, Any]]) -> str:
    return f"# config: {json.dumps(provenance or {}, sort_keys=True)}\n"


# ── Sensor data ──────────────────────────────────────────────────────────────

def write_scan(points: np.ndarray, path: PathLike, reflectance: float = 0.0) -> Path:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    records = np.empty((pts.shape[0], 4), dtype="<f4")
    records[:, :3] = pts
    records[:, 3] = reflectance
    return _write_bytes(path, records.tobytes())


def write_calibration(cam: CameraModel, path: PathLike) -> Path:
    rt = np.hstack([cam.extrinsics.rotation, cam.extrinsics.translation[:, None]])
    lines = [
        f"K: {cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}",
        f"size: {cam.width} {cam.height}",
        "Tr: " + " ".join(repr(float(v)) for v in rt.reshape(-1)),
    ]
    return _write_text(path, "\n".join(lines) + "\n")


def write_poses(poses: Sequence[Pose], path: PathLike) -> Path:
    lines = []
    for pose in poses:
        rt = np.hstack([pose.T_WL.rotation, pose.T_WL.translation[:, None]])
        lines.append(" ".join(repr(float(v)) for v in rt.reshape(-1)))
    return _write_text(path, "".join(line + "\n" for line in lines))


# ── Detection records ────────────────────────────────────────────────────────

def write_decoded_detections(
    detections: Sequence[Detection2D], width: int, height: int, path: PathLike
) -> Path:
    record = DecodedFrameRecord(
        width=width,
        height=height,
        detections=[
            DecodedDetectionRecord(
                box=d.box.as_list(), class_id=d.class_id, confidence=d.confidence, rle=rle_encode(d.mask),
            )
            for d in detections
        ],
    )
    return _write_text(path, _dump_json(record.model_dump()))


def write_prototypes(protos: PrototypeSet, path: PathLike) -> Path:
    return _write_bytes(path, np.asarray(protos.maps, dtype="<f4").tobytes())


def write_raw_detections(
    raw: Sequence[RawDetection],
    protos: PrototypeSet,
    width: int,
    height: int,
    path: PathLike,
    protos_path: Optional[PathLike] = None,
) -> Path:
    record = RawFrameRecord(
        width=width,
        height=height,
        detections=[
            RawDetectionRecord(
                cx=d.cx, cy=d.cy, w=d.width, h=d.height,
                class_confidences=d.class_confidences.tolist(),
                mask_weights=d.mask_weights.tolist(),
            )
            for d in raw
        ],
    )
    path = _write_text(path, _dump_json(record.model_dump()))
    write_prototypes(protos, protos_path if protos_path else path.with_suffix(".protos.bin"))
    return path


def write_manifest(record: ManifestRecord, path: PathLike) -> Path:
    return _write_text(path, _dump_json(record.model_dump()))


def write_ground_truth(boxes: Iterable[GroundTruthBox], path: PathLike) -> Path:
    lines = []
    for gt in boxes:
        rec = GroundTruthRecord(
            scan_id=gt.scan_id,
            class_id=gt.class_id,
            min=gt.box.min_corner.tolist(),
            max=gt.box.max_corner.tolist(),
        )
        lines.append(json.dumps(rec.model_dump(), sort_keys=True))
    return _write_text(path, "".join(line + "\n" for line in lines))


# ── Registry export ──────────────────────────────────────────────────────────

def registry_records(
    snapshots: Iterable[ObjectSnapshot], class_names: Optional[List[str]] = None
) -> List[RegistryRecord]:
    records = []
    for snap in sorted(snapshots, key=lambda s: s.object_id):
        (cx, cy, cz), (x0, y0, z0), (x1, y1, z1) = snap.centroid, snap.box.min_corner, snap.box.max_corner
        records.append(RegistryRecord(
            object_id=snap.object_id, class_id=snap.class_id,
            class_name=class_name(snap.class_id, class_names),
            centroid_x=cx, centroid_y=cy, centroid_z=cz,
            min_x=x0, min_y=y0, min_z=z0,
            max_x=x1, max_y=y1, max_z=z1,
            observation_count=snap.observation_count,
            point_count=snap.point_count,
            best_confidence=snap.best_confidence,
        ))
    return records


def write_registry(
    snapshots: Iterable[ObjectSnapshot],
    path: PathLike,
    provenance: Optional[Dict[str, Any]] = None,
    class_names: Optional[List[str]] = None,
) -> Path:
    """One CSV row per object in object_id order, floats at fixed precision."""
    buf = io.StringIO()
    buf.write(provenance_line(provenance))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REGISTRY_FIELDS)
    for rec in registry_records(snapshots, class_names):
        row = rec.model_dump()
        writer.writerow([_fmt(row[f]) if isinstance(row[f], float) else row[f] for f in REGISTRY_FIELDS])
    path = _write_text(path, buf.getvalue())
    logger.info(f"  Registry: {path}")
    return path


def write_registry_jsonl(records: Iterable[RegistryRecord], path: PathLike) -> Path:
    lines = [json.dumps(rec.model_dump(), sort_keys=True) for rec in records]
    return _write_text(path, "".join(line + "\n" for line in lines))


# ── PLY ──────────────────────────────────────────────────────────────────────

def object_color(object_id: int) -> Color:
    """Stable pseudo-random color per object id, never pure white."""
    digest = hashlib.md5(str(object_id).encode("ascii")).digest()
    r, g, b = digest[0], digest[1], digest[2]
    if (r, g, b) == BACKGROUND_COLOR:
        b = 0
    return r, g, b


def write_ply(points: np.ndarray, colors: np.ndarray, path: PathLike) -> Path:
    """ASCII PLY 1.0 with x y z red green blue per vertex."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    if rgb.shape[0] != pts.shape[0]:
        raise ValueError(f"{pts.shape[0]} points but {rgb.shape[0]} colors")
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    buf.write(f"element vertex {pts.shape[0]}\n")
    buf.write("property float x\nproperty float y\nproperty float z\n")
    buf.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    buf.write("end_header\n")
    for (x, y, z), (r, g, b) in zip(pts, rgb):
        buf.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {r} {g} {b}\n")
    return _write_text(path, buf.getvalue())


def write_clusters_ply(instances: Iterable[ObjectInstance], path: PathLike) -> Path:
    """Every registry cluster, one color per object id."""
    chunks, colors = [], []
    for inst in instances:
        chunks.append(inst.cluster.points)
        colors.append(np.tile(object_color(inst.object_id), (len(inst.cluster), 1)))
    if not chunks:
        return write_ply(np.zeros((0, 3)), np.zeros((0, 3)), path)
    return write_ply(np.vstack(chunks), np.vstack(colors), path)


def write_map_ply(map_points: np.ndarray, instances: Iterable[ObjectInstance], path: PathLike) -> Path:
    """Whole global map, background white and object points colored by id.

    Instances never refined against the map have no map indices; their cluster
    points are appended as extra vertices.
    """
    pts = np.asarray(map_points, dtype=np.float64).reshape(-1, 3)
    colors = np.tile(BACKGROUND_COLOR, (pts.shape[0], 1))
    extra_pts, extra_colors = [], []
    for inst in instances:
        color = object_color(inst.object_id)
        if inst.map_indices is not None:
            colors[inst.map_indices] = color
        else:
            extra_pts.append(inst.cluster.points)
            extra_colors.append(np.tile(color, (len(inst.cluster), 1)))
    if extra_pts:
        pts = np.vstack([pts] + extra_pts)
        colors = np.vstack([colors] + extra_colors)
    return write_ply(pts, colors, path)


def write_box_corners_ply(records: Iterable[RegistryRecord], path: PathLike) -> Path:
    """Eight corner vertices per registry box, colored by object id."""
    chunks, colors = [], []
    for rec in records:
        lo = np.array([rec.min_x, rec.min_y, rec.min_z])
        hi = np.array([rec.max_x, rec.max_y, rec.max_z])
        corners = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                            for i in range(8)])
        chunks.append(corners)
        colors.append(np.tile(object_color(rec.object_id), (8, 1)))
    if not chunks:
        return write_ply(np.zeros((0, 3)), np.zeros((0, 3)), path)
    return write_ply(np.vstack(chunks), np.vstack(colors), path)


# ── Evaluation ───────────────────────────────────────────────────────────────

def eval_report_dict(report: EvalReport, provenance: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "miou": round(report.miou, EXPORT_PRECISION),
        "matched": report.matched,
        "unmatched_gt": report.unmatched_gt,
        "unmatched_pred": report.unmatched_pred,
        "categories": dict(report.category_counts),
        "classes": [
            {
                "class_id": s.class_id,
                "class_name": s.class_name,
                "iou": round(s.iou, EXPORT_PRECISION),
                "gt_count": s.gt_count,
                "matched": s.matched,
                "detected": s.detected,
                "partial": s.partial,
                "missed": s.missed,
            }
            for s in report.class_scores
        ],
        "timing": report.timing.summary() if report.timing else None,
        "config": provenance or {},
    }


def write_eval_report(report: EvalReport, path: PathLike, provenance: Optional[Dict[str, Any]] = None) -> Path:
    path = _write_text(path, _dump_json(eval_report_dict(report, provenance)))
    logger.info(f"  Eval: {path}")
    return path
