"""
Layer I: 3D bounding box generation.

The scan is projected into the image, points falling on an instance mask take
that instance's label, every instance is Euclidean-clustered and its largest
cluster becomes the object observation whose box is fitted in frame L.
"""

import logging
from typing import List, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from src.geometry.frames import fit_aabb, project_points
from src.types import CameraModel, Cluster, Detection2D, Frame, PointCloud, ScanDetections

logger = logging.getLogger(__name__)

BACKGROUND = -1
KNN_EDGES = 8               # nearest neighbours tried per point before bridging components
MAX_BRIDGED_COMPONENTS = 16  # above this, fall back to an all-pairs radius search


def label_points(scan: PointCloud, cam: CameraModel, detections: List[Detection2D]) -> np.ndarray:
    """Per-point instance label (index into `detections`) or BACKGROUND.

    Pixels are rounded to nearest. When masks overlap, the earlier detection
    (higher NMS score) keeps the point.
    """
    for i, det in enumerate(detections):
        if det.mask.width != cam.width or det.mask.height != cam.height:
            raise ValueError(
                f"detection {i} mask is {det.mask.width}x{det.mask.height}, "
                f"camera frame is {cam.width}x{cam.height}"
            )

    labels = np.full(len(scan), BACKGROUND, dtype=np.int64)
    if not detections or len(scan) == 0:
        return labels

    uv, valid = project_points(scan.points, cam)
    cols = np.floor(uv[valid, 0] + 0.5).astype(np.int64)
    rows = np.floor(uv[valid, 1] + 0.5).astype(np.int64)
    in_image = (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)

    idx = np.flatnonzero(valid)[in_image]
    rows, cols = rows[in_image], cols[in_image]
    free = np.ones(idx.size, dtype=bool)
    # masks are read only at point pixels; the earliest detection keeps shared points
    for label, det in enumerate(detections):
        take = free & det.mask.data[rows, cols]
        labels[idx[take]] = label
        free &= ~take
    return labels


def _graph(rows: np.ndarray, cols: np.ndarray, n: int) -> coo_matrix:
    return coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def _components(pts: np.ndarray, tolerance: float) -> np.ndarray:
    """Component label per point under the "distance ≤ tolerance" adjacency.

    Edges come from each point's nearest neighbours and from shared grid cells
    of side tolerance/√3 (any two points in one cell are within tolerance).
    Components of that partial graph are then joined wherever a point of one
    lies within tolerance of another, which makes the result exact.
    """
    n = pts.shape[0]
    bound = tolerance * (1.0 + 1e-9)
    tree = cKDTree(pts)
    dist, nbr = tree.query(pts, k=min(KNN_EDGES + 1, n), distance_upper_bound=bound)
    dist, nbr = dist.reshape(n, -1), nbr.reshape(n, -1)
    near = dist <= tolerance
    rows = np.broadcast_to(np.arange(n)[:, None], nbr.shape)[near]
    cols = nbr[near]

    side = tolerance / np.sqrt(3.0) * (1.0 - 1e-9)
    _, first, cell = np.unique(
        np.floor(pts / side).astype(np.int64), axis=0, return_index=True, return_inverse=True,
    )
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, first[cell.reshape(-1)]])
    count, component = connected_components(_graph(rows, cols, n), directed=False)
    if count == 1:
        return component

    # a point with no neighbour inside tolerance is already a final singleton
    loose = np.flatnonzero(near.sum(axis=1) > 1)
    labels = np.unique(component[loose])
    if labels.size <= 1:
        return component
    if labels.size > MAX_BRIDGED_COMPONENTS:
        pairs = np.asarray(tree.query_pairs(r=tolerance, output_type="ndarray"), dtype=np.int64).reshape(-1, 2)
        return connected_components(_graph(pairs[:, 0], pairs[:, 1], n), directed=False)[1]

    bridge_rows, bridge_cols = [rows], [cols]
    for j in labels[:-1]:
        own = loose[component[loose] == j]
        rest = loose[component[loose] > j]
        lo, hi = pts[own].min(axis=0) - tolerance, pts[own].max(axis=0) + tolerance
        rest = rest[np.all((pts[rest] >= lo) & (pts[rest] <= hi), axis=1)]
        if rest.size == 0:
            continue
        d, _ = cKDTree(pts[own]).query(pts[rest], k=1, distance_upper_bound=bound)
        joined = rest[d <= tolerance]
        bridge_rows.append(joined)
        bridge_cols.append(np.full(joined.size, own[0]))
    if len(bridge_rows) == 1:
        return component
    graph = _graph(np.concatenate(bridge_rows), np.concatenate(bridge_cols), n)
    return connected_components(graph, directed=False)[1]


def euclidean_cluster(points: np.ndarray, tolerance: float, min_size: int = 1) -> List[np.ndarray]:
    """Connected components under the "distance ≤ tolerance" adjacency.

    Components below `min_size` are dropped. Clusters come back largest first,
    ties broken by the smallest contained index; indices inside a cluster are sorted.
    """
    if tolerance <= 0:
        raise ValueError(f"tolerance must be positive, got {tolerance}")
    if min_size < 1:
        raise ValueError(f"min_size must be at least 1, got {min_size}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return []

    component = _components(pts, tolerance)

    clusters = [
        members for members in np.split(np.argsort(component, kind="stable"),
                                        np.cumsum(np.bincount(component))[:-1])
        if members.size >= min_size
    ]
    clusters.sort(key=lambda c: (-c.size, int(c[0])))
    return clusters


def select_object_cluster(clusters: List[np.ndarray]) -> Optional[np.ndarray]:
    """The cluster with the most points; ties go to the one holding the smallest index."""
    if not clusters:
        return None
    return min(clusters, key=lambda c: (-len(c), int(np.min(c))))


def generate_boxes(
    scan: PointCloud,
    cam: CameraModel,
    detections: List[Detection2D],
    tolerance: float = 0.5,
    min_size: int = 5,
    scan_id: int = 0,
) -> ScanDetections:
    if scan.frame != Frame.LIDAR:
        raise ValueError(f"Layer I expects a frame-L scan, got {scan.frame.value}")
    labels = label_points(scan, cam, detections)
    result = ScanDetections(scan_id=scan_id, frame=Frame.LIDAR)
    by_label = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[by_label], np.arange(len(detections) + 1))

    for label, det in enumerate(detections):
        members = by_label[bounds[label]:bounds[label + 1]]
        if members.size == 0:
            continue
        clusters = euclidean_cluster(scan.points[members], tolerance, min_size)
        chosen = select_object_cluster(clusters)
        if chosen is None:
            logger.debug(f"scan {scan_id}: detection {label} has only sub-minimum clusters, dropped")
            continue
        indices = members[chosen]
        cluster = Cluster(
            points=scan.points[indices],
            frame=Frame.LIDAR,
            class_id=det.class_id,
            confidence=det.confidence,
            indices=indices,
        )
        result.clusters.append(cluster)
        result.boxes.append(fit_aabb(cluster.points, Frame.LIDAR))

    logger.debug(
        f"scan {scan_id}: {int((labels != BACKGROUND).sum())} labelled points, "
        f"{len(result.clusters)}/{len(detections)} detections kept"
    )
    return result
