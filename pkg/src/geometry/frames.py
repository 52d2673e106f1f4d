"""
Coordinate frames, rigid transforms, pinhole projection and axis-aligned boxes.

Frames: L (LiDAR sensor), C (camera image), W (fixed world). A LiDAR point is
projected to pixels with K·[R|t] and placed in the world with T_WL.
"""

from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.types import Aabb3, CameraModel, Frame, OverlapMetric, Pixel, PointCloud, RigidTransform

MIN_DEPTH = 1e-6  # meters in front of the image plane


def project_point(p: np.ndarray, cam: CameraModel) -> Optional[Pixel]:
    """Project a frame-L point to pixel coordinates; None at or behind the image plane.

    No clipping to the image bounds happens here.
    """
    p_cam = cam.extrinsics.apply(np.asarray(p, dtype=np.float64).reshape(3))
    depth = p_cam[2]
    if depth <= MIN_DEPTH:
        return None
    uvw = cam.intrinsics @ p_cam
    return Pixel(float(uvw[0] / depth), float(uvw[1] / depth))


def project_points(points: np.ndarray, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised project_point: returns (uv (N,2), valid (N,) bool)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = cam.extrinsics.apply(pts)
    depth = p_cam[:, 2]
    valid = depth > MIN_DEPTH
    uv = np.full((pts.shape[0], 2), np.nan)
    if np.any(valid):
        uvw = p_cam[valid] @ cam.intrinsics.T
        uv[valid] = uvw[:, :2] / depth[valid, None]
    return uv, valid


def transform_point(p: np.ndarray, T: RigidTransform) -> np.ndarray:
    return T.rotation @ np.asarray(p, dtype=np.float64).reshape(3) + T.translation


def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    if cloud.frame != T.source:
        raise ValueError(
            f"cloud is in frame {cloud.frame.value} but transform maps "
            f"{T.source.value}->{T.target.value}"
        )
    return PointCloud(T.apply(cloud.points), T.target)


def fit_aabb(points: np.ndarray, frame: Frame = Frame.LIDAR) -> Aabb3:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty cluster")
    return Aabb3(pts.min(axis=0), pts.max(axis=0), frame)


def intersection_volume(a: Aabb3, b: Aabb3) -> float:
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    return float(np.prod(np.clip(hi - lo, 0.0, None)))


def overlap_ratio(a: Aabb3, b: Aabb3, metric: OverlapMetric = OverlapMetric.MIN_RATIO) -> float:
    """Overlap of two boxes in [0, 1].

    iou:       vol(a∩b) / vol(a∪b)
    min_ratio: vol(a∩b) / min(vol(a), vol(b)); a small box fully inside a big one scores 1.
    Zero-volume boxes always score 0.
    """
    if a.frame != b.frame:
        raise ValueError(f"cannot compare boxes in frames {a.frame.value} and {b.frame.value}")
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    if OverlapMetric(metric) == OverlapMetric.IOU:
        denom = a.volume + b.volume - inter
    else:
        denom = min(a.volume, b.volume)
    if denom <= 0.0:
        return 0.0
    return float(min(1.0, inter / denom))


def pad_thin_axes(box: Aabb3, min_extent: float) -> Aabb3:
    """Grow every axis shorter than `min_extent` to that length about the box centre."""
    extent = box.extent
    if min_extent <= 0.0 or np.all(extent >= min_extent):
        return box
    thin = extent < min_extent
    center = box.center
    lo = np.where(thin, center - min_extent / 2.0, box.min_corner)
    hi = np.where(thin, center + min_extent / 2.0, box.max_corner)
    return Aabb3(lo, hi, box.frame)


def enclosed_fraction(pred: Aabb3, gt: Aabb3) -> float:
    """Share of the ground-truth volume enclosed by the predicted box."""
    if gt.volume <= 0.0:
        return 0.0
    return intersection_volume(pred, gt) / gt.volume


def yaw_transform(
    yaw: float,
    translation=(0.0, 0.0, 0.0),
    source: Frame = Frame.LIDAR,
    target: Frame = Frame.WORLD,
) -> RigidTransform:
    """Rotation about +z by `yaw` radians followed by a translation."""
    rot = Rotation.from_euler("z", yaw).as_matrix()
    return RigidTransform(rot, np.asarray(translation, dtype=np.float64), source, target)


def orthonormalize(rotation: np.ndarray, tolerance: float = 1e-3) -> np.ndarray:
    """Snap a near-rotation to the closest proper rotation.

    Raises ValueError when the matrix is a reflection or further than `tolerance`
    (max abs entry of R·Rᵀ − I) from orthonormal.
    """
    rot = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(rot)):
        raise ValueError("rotation has non-finite entries")
    if np.linalg.det(rot) <= 0.0:
        raise ValueError("improper rotation")
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > tolerance:
        raise ValueError(f"rotation is not orthonormal (error {err:.2e} > {tolerance:.0e})")
    u, _, vt = np.linalg.svd(rot)
    return u @ vt
