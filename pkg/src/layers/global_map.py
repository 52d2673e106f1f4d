"""
Layer III: global map localization.

The world point cloud accumulates every scan. After each merge step, object
clusters absorb the map points lying inside a cube of side r centred on any of
their points, and each object is localized by the centroid of its cluster.

Voxel keys are packed into sortable int64 codes (21 bits per axis) so the
voxel index and the leaf filter are sorted arrays searched with numpy rather
than Python dictionaries.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from src.types import Cluster, Frame, PointCloud

logger = logging.getLogger(__name__)

VoxelKey = Tuple[int, int, int]

MAX_FIXPOINT_PASSES = 100

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1

_NO_INDICES = np.zeros(0, dtype=np.int64)


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    """Integer voxel coordinates floor(p / size), shape (N, 3)."""
    return np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 3) / size).astype(np.int64)


def encode_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) voxel keys into int64 codes that sort like the keys (x, then y, then z)."""
    shifted = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + KEY_OFFSET
    if shifted.size and (shifted.min() < 0 or shifted.max() > KEY_MASK):
        raise ValueError(f"voxel keys beyond ±{KEY_OFFSET - 1}; the map extent is too large for this voxel size")
    return (shifted[:, 0] << (2 * KEY_BITS)) | (shifted[:, 1] << KEY_BITS) | shifted[:, 2]


def decode_keys(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64).reshape(-1)
    fields = np.stack([c >> (2 * KEY_BITS), c >> KEY_BITS, c], axis=1) & KEY_MASK
    return fields - KEY_OFFSET


def _sorted_contains(sorted_codes: np.ndarray, codes: np.ndarray) -> np.ndarray:
    if sorted_codes.size == 0:
        return np.zeros(codes.shape[0], dtype=bool)
    pos = np.minimum(np.searchsorted(sorted_codes, codes), sorted_codes.size - 1)
    return sorted_codes[pos] == codes


def _expand_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s + c) for every (s, c)."""
    total = int(counts.sum())
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(starts, counts) + np.arange(total, dtype=np.int64) - offsets


class GlobalMap:
    """Append-only world point cloud with a voxel index of cell side r.

    Single writer: scans are integrated in scan order. Queries are read-only.
    """

    def __init__(self, r: float = 0.2, leaf_size: Optional[float] = 0.1):
        if r <= 0:
            raise ValueError(f"voxel size r must be positive, got {r}")
        self.r = r
        self.leaf_size = leaf_size if leaf_size else None
        self._chunks: List[np.ndarray] = []
        self._points: Optional[np.ndarray] = None
        self._size = 0
        self._codes = _NO_INDICES      # voxel code of every map point, ascending
        self._members = _NO_INDICES    # map index behind each entry of _codes
        self._leaves = _NO_INDICES     # occupied leaf codes, ascending
        self.scan_sources: List[np.ndarray] = []  # per integrated scan: map indices it contributed

    def __len__(self) -> int:
        return self._size

    @property
    def points(self) -> np.ndarray:
        if self._points is None or self._points.shape[0] != self._size:
            self._points = np.vstack(self._chunks) if self._chunks else np.zeros((0, 3))
            self._chunks = [self._points] if self._size else []
        return self._points

    def as_cloud(self) -> PointCloud:
        return PointCloud(self.points, Frame.WORLD)

    @property
    def voxel_index(self) -> Dict[VoxelKey, List[int]]:
        """Voxel key → map indices in ascending order, rebuilt from the sorted index."""
        codes, starts = np.unique(self._codes, return_index=True)
        ends = np.append(starts[1:], self._codes.size)
        return {
            tuple(key): self._members[s:e].tolist()
            for key, s, e in zip(decode_keys(codes).tolist(), starts, ends)
        }

    def _leaf_filter(self, pts: np.ndarray) -> np.ndarray:
        """Keep at most one point per leaf voxel, first come first kept, across the whole map."""
        leaves, first = np.unique(encode_keys(voxel_keys(pts, self.leaf_size)), return_index=True)
        fresh = ~_sorted_contains(self._leaves, leaves)
        self._leaves = np.insert(self._leaves, np.searchsorted(self._leaves, leaves[fresh]), leaves[fresh])
        return np.sort(first[fresh])

    def integrate_scan(self, scan_w: PointCloud) -> np.ndarray:
        """Append a frame-W scan; returns the map indices of the points added."""
        if scan_w.frame != Frame.WORLD:
            raise ValueError(f"map integration expects a frame-W scan, got {scan_w.frame.value}")
        pts = scan_w.points
        codes = encode_keys(voxel_keys(pts, self.r))
        if self.leaf_size and len(pts):
            keep = self._leaf_filter(pts)
            pts, codes = pts[keep], codes[keep]
        start = self._size
        added = np.arange(start, start + pts.shape[0], dtype=np.int64)
        if pts.shape[0]:
            self._chunks.append(pts)
            self._size += pts.shape[0]
            order = np.argsort(codes, kind="stable")
            at = np.searchsorted(self._codes, codes[order], side="right")
            self._codes = np.insert(self._codes, at, codes[order])
            self._members = np.insert(self._members, at, added[order])
        self.scan_sources.append(added)
        return added

    def cube_neighbors(self, point_sets: Sequence[np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
        """For each point set, the map points q with max-norm |q − p| ≤ r/2 for some p in the set.

        Returns (ascending map indices, max-norm distance of each to its nearest
        set point) per set. All sets are answered by one tree query: a fourth
        coordinate spaces the sets further apart than r/2.
        """
        sets = [np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in point_sets]
        out = [(_NO_INDICES, np.zeros(0))] * len(sets)
        sizes = [s.shape[0] for s in sets]
        if self._size == 0 or sum(sizes) == 0:
            return out
        half = self.r / 2.0
        pts = np.vstack(sets)
        owner = np.repeat(np.arange(len(sets), dtype=np.int64), sizes)

        # a point within r/2 of the set lies in the set's box padded by r/2; each
        # (x, y) voxel column of that box is one contiguous run of sorted codes
        full = np.flatnonzero(np.asarray(sizes) > 0)
        slack = half * (1.0 + 1e-9)
        lo_key = voxel_keys(np.array([sets[i].min(axis=0) for i in full]) - slack, self.r)
        hi_key = voxel_keys(np.array([sets[i].max(axis=0) for i in full]) + slack, self.r)
        ny = hi_key[:, 1] - lo_key[:, 1] + 1
        columns = (hi_key[:, 0] - lo_key[:, 0] + 1) * ny
        col = np.repeat(np.arange(full.size), columns)
        step = _expand_ranges(np.zeros(full.size, dtype=np.int64), columns)
        x = lo_key[col, 0] + step // ny[col]
        y = lo_key[col, 1] + step % ny[col]
        first = np.searchsorted(self._codes, encode_keys(np.column_stack([x, y, lo_key[col, 2]])), side="left")
        counts = np.searchsorted(self._codes, encode_keys(np.column_stack([x, y, hi_key[col, 2]])), side="right") - first
        cand = self._members[_expand_ranges(first, counts)]
        if cand.size == 0:
            return out
        cand_owner = full[np.repeat(col, counts)]

        spacing = 4.0 * self.r
        tree = cKDTree(np.column_stack([pts, owner * spacing]))
        # the tree bound carries a small slack, the comparison below is exact
        dist, _ = tree.query(
            np.column_stack([self.points[cand], cand_owner * spacing]),
            k=1, p=np.inf, distance_upper_bound=half * (1.0 + 1e-9) + 1e-12,
        )
        hit = dist <= half
        cand, cand_owner, dist = cand[hit], cand_owner[hit], dist[hit]
        order = np.lexsort((cand, cand_owner))
        cand, cand_owner, dist = cand[order], cand_owner[order], dist[order]
        bounds = np.searchsorted(cand_owner, np.arange(len(sets) + 1))
        return [(cand[bounds[i]:bounds[i + 1]], dist[bounds[i]:bounds[i + 1]]) for i in range(len(sets))]


def integrate_scan(global_map: GlobalMap, scan_w: PointCloud) -> GlobalMap:
    global_map.integrate_scan(scan_w)
    return global_map


def absorb(
    global_map: GlobalMap, point_sets: Sequence[np.ndarray], to_fixpoint: bool = False
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Map points each set absorbs, as (ascending map indices, new-point mask).

    The mask is False for map points whose coordinates already occur in the set.
    With `to_fixpoint` the expansion continues from the newly absorbed points
    until nothing joins (at most MAX_FIXPOINT_PASSES rounds).
    """
    first = global_map.cube_neighbors(point_sets)
    found = [idx for idx, _ in first]
    if to_fixpoint:
        frontier = list(found)
        for _ in range(MAX_FIXPOINT_PASSES):
            active = [i for i, f in enumerate(frontier) if f.size]
            if not active:
                break
            grown = global_map.cube_neighbors([global_map.points[frontier[i]] for i in active])
            frontier = [_NO_INDICES] * len(found)
            for i, (idx, _) in zip(active, grown):
                new = np.setdiff1d(idx, found[i], assume_unique=True)
                if new.size:
                    found[i] = np.union1d(found[i], new)
                    frontier[i] = new
        else:
            logger.debug(f"fixpoint refinement stopped after {MAX_FIXPOINT_PASSES} passes")
    out = []
    for (idx, dist), indices in zip(first, found):
        # a map point equal to a set point is at distance 0 from it, so the first pass finds it
        fresh = ~np.isin(indices, idx[dist == 0.0], assume_unique=True)
        out.append((indices, fresh))
    return out


def refine_indices(global_map: GlobalMap, cluster_points: np.ndarray, to_fixpoint: bool = False) -> np.ndarray:
    """Map indices q with max-norm |q − p| ≤ r/2 for some cluster point p, sorted."""
    return absorb(global_map, [cluster_points], to_fixpoint)[0][0]


def _grow(global_map: GlobalMap, cluster: Cluster, indices: np.ndarray, fresh: np.ndarray) -> Cluster:
    if not fresh.any():
        return cluster
    extra = global_map.points[indices[fresh]]
    _, first = np.unique(extra, axis=0, return_index=True)
    return Cluster(
        points=np.vstack([cluster.points, extra[np.sort(first)]]),
        frame=Frame.WORLD,
        class_id=cluster.class_id,
        confidence=cluster.confidence,
    )


def refine_cluster(global_map: GlobalMap, cluster: Cluster, to_fixpoint: bool = False) -> Cluster:
    """Grow a cluster by the map points within the r-cube of any of its points.

    The result keeps every point of the cluster and appends the absorbed map
    points it did not already hold, so refinement never shrinks an object.
    Single pass by default; `to_fixpoint` repeats the expansion from the
    absorbed points until no new map point joins. When nothing new is absorbed
    the cluster itself is returned.
    """
    if cluster.frame != Frame.WORLD:
        raise ValueError(f"refinement expects a frame-W cluster, got {cluster.frame.value}")
    indices, fresh = absorb(global_map, [cluster.points], to_fixpoint)[0]
    return _grow(global_map, cluster, indices, fresh)


def localize(cluster: Cluster) -> np.ndarray:
    if len(cluster) == 0:
        raise ValueError("empty cluster")
    return cluster.points.mean(axis=0)


def refine_registry(
    global_map: GlobalMap,
    registry,
    scan_id: int,
    scan_index: int = 0,
    refresh_period: int = 10,
    to_fixpoint: bool = False,
):
    """Refine the instances touched by `scan_id`; every `refresh_period` scans refresh the rest too.

    Every selected instance is refined in one batched map query. Returns the
    registry, updated in place.
    """
    touched = set(registry.touched(scan_id))
    refresh_all = refresh_period > 0 and scan_index > 0 and scan_index % refresh_period == 0
    targets = [inst for inst in registry if refresh_all or inst.object_id in touched]
    if not targets:
        return registry
    refined = 0
    results = absorb(global_map, [inst.cluster.points for inst in targets], to_fixpoint)
    for inst, (indices, fresh) in zip(targets, results):
        if indices.size == 0:
            continue
        registry.update_cluster(inst.object_id, _grow(global_map, inst.cluster, indices, fresh), indices)
        refined += 1
    logger.debug(f"scan {scan_id}: refined {refined} instance(s) against {len(global_map)} map points")
    return registry
