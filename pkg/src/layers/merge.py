"""
Layer II: 3D bounding box pairing and merging.

Per-scan clusters are moved to frame W with the scan pose, each new box is
paired with the registry instance it overlaps most, and paired observations are
merged by refitting one box over the union of both clusters.
"""

import logging
from collections import defaultdict
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from src.geometry.frames import fit_aabb, overlap_ratio, pad_thin_axes, transform_cloud
from src.types import (
    Aabb3, Cluster, Frame, ObjectInstance, ObjectSnapshot, OverlapMetric,
    PointCloud, Pose, ScanDetections,
)

logger = logging.getLogger(__name__)

MIN_CELL_SIZE = 1e-3  # meters; keeps the hash usable while only point-sized boxes exist
MIN_PAIRING_EXTENT = 0.5  # meters; planar or line-like boxes are padded to this before scoring


def to_world(scan_dets: ScanDetections, pose: Pose) -> ScanDetections:
    """Move clusters to frame W and refit their boxes from the moved points."""
    if pose.scan_id != scan_dets.scan_id:
        raise ValueError(f"pose is for scan {pose.scan_id}, detections for scan {scan_dets.scan_id}")
    if scan_dets.frame != Frame.LIDAR:
        raise ValueError(f"expected frame-L detections, got {scan_dets.frame.value}")
    out = ScanDetections(scan_id=scan_dets.scan_id, frame=Frame.WORLD)
    for cluster in scan_dets.clusters:
        moved = transform_cloud(PointCloud(cluster.points, Frame.LIDAR), pose.T_WL)
        world = Cluster(
            points=moved.points,
            frame=Frame.WORLD,
            class_id=cluster.class_id,
            confidence=cluster.confidence,
            indices=cluster.indices,
        )
        out.clusters.append(world)
        out.boxes.append(fit_aabb(world.points, Frame.WORLD))
    return out


def union_points(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Union of two point sets with exactly equal coordinates collapsed."""
    return np.unique(np.vstack([a, b]), axis=0)


class _SpatialHash:
    """Uniform grid over box centres; cell side tracks the largest box diagonal seen.

    Two boxes that overlap have centres closer than that diagonal, so their
    cells differ by at most one step per axis.
    """

    def __init__(self):
        self.cell = MIN_CELL_SIZE
        self.buckets: Dict[Tuple[int, int, int], set] = defaultdict(set)
        self.keys: Dict[int, Tuple[int, int, int]] = {}

    def _key(self, center: np.ndarray) -> Tuple[int, int, int]:
        k = np.floor(center / self.cell).astype(np.int64)
        return int(k[0]), int(k[1]), int(k[2])

    def rebuild(self, entries: Iterable[Tuple[int, Aabb3]]):
        self.buckets = defaultdict(set)
        self.keys = {}
        for object_id, box in entries:
            self._insert(object_id, box)

    def _insert(self, object_id: int, box: Aabb3):
        key = self._key(box.center)
        self.keys[object_id] = key
        self.buckets[key].add(object_id)

    def remove(self, object_id: int):
        key = self.keys.pop(object_id, None)
        if key is not None:
            self.buckets[key].discard(object_id)

    def upsert(self, object_id: int, box: Aabb3, entries: Callable[[], Iterable[Tuple[int, Aabb3]]]) -> None:
        if box.diagonal > self.cell:
            self.cell = box.diagonal
            self.rebuild(entries())
            return
        self.remove(object_id)
        self._insert(object_id, box)

    def candidates(self, box: Aabb3) -> List[int]:
        kx, ky, kz = self._key(box.center)
        found = set()
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    found |= self.buckets.get((kx + dx, ky + dy, kz + dz), set())
        return sorted(found)


class ObjectRegistry:
    """Unique world-frame objects across the whole sequence.

    Single writer: scans are applied in scan order. `snapshot()` is a read-only view.
    Boxes are scored after `pad_thin_axes(box, min_extent)`, so repeated views of
    one flat face still pair; the stored boxes stay tight.
    """

    def __init__(self, spatial_index: bool = True, min_extent: float = MIN_PAIRING_EXTENT):
        self.instances: Dict[int, ObjectInstance] = {}
        self.next_id = 0
        self.spatial_index = spatial_index
        self.min_extent = min_extent
        self.overlap_evaluations = 0
        self._hash = _SpatialHash()

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances[i] for i in sorted(self.instances))

    def get(self, object_id: int) -> ObjectInstance:
        return self.instances[object_id]

    # ── Lookup ───────────────────────────────────────────────────────────

    def pairing_box(self, box: Aabb3) -> Aabb3:
        return pad_thin_axes(box, self.min_extent)

    def _pairing_entries(self) -> List[Tuple[int, Aabb3]]:
        return [(oid, self.pairing_box(inst.box)) for oid, inst in self.instances.items()]

    def _candidate_ids(self, box: Aabb3) -> List[int]:
        """Ids that may overlap `box`, which must already be a pairing box."""
        if self.spatial_index:
            if box.diagonal > self._hash.cell:
                self._hash.cell = box.diagonal
                self._hash.rebuild(self._pairing_entries())
            return self._hash.candidates(box)
        return sorted(self.instances)

    def _ratio(self, a: Aabb3, b: Aabb3, metric: OverlapMetric) -> float:
        self.overlap_evaluations += 1
        return overlap_ratio(a, b, metric)

    def best_match(
        self, box: Aabb3, class_id: int, metric: OverlapMetric, class_agnostic: bool = False
    ) -> Tuple[Optional[int], float]:
        """Registry instance with the highest overlap; ties go to the lower object_id."""
        best_id, best_ratio = None, 0.0
        query = self.pairing_box(box)
        for oid in self._candidate_ids(query):
            inst = self.instances[oid]
            if not class_agnostic and inst.class_id != class_id:
                continue
            ratio = self._ratio(query, self.pairing_box(inst.box), metric)
            if ratio > best_ratio:
                best_id, best_ratio = oid, ratio
        return best_id, best_ratio

    # ── Mutation ─────────────────────────────────────────────────────────

    def _index(self, inst: ObjectInstance):
        if self.spatial_index:
            self._hash.upsert(inst.object_id, self.pairing_box(inst.box), self._pairing_entries)

    def insert(self, cluster: Cluster, scan_id: int) -> int:
        oid = self.next_id
        self.next_id += 1
        inst = ObjectInstance(
            object_id=oid,
            class_id=cluster.class_id,
            best_confidence=cluster.confidence,
            cluster=cluster,
            box=fit_aabb(cluster.points, Frame.WORLD),
            observation_count=1,
            last_seen_scan=scan_id,
        )
        self.instances[oid] = inst
        self._index(inst)
        return oid

    def merge_into(self, object_id: int, cluster: Cluster, scan_id: int, observations: int = 1):
        inst = self.instances[object_id]
        points = union_points(inst.cluster.points, cluster.points)
        inst.cluster = Cluster(
            points=points,
            frame=Frame.WORLD,
            class_id=inst.class_id,
            confidence=max(inst.best_confidence, cluster.confidence),
        )
        inst.box = fit_aabb(points, Frame.WORLD)
        inst.observation_count += observations
        inst.best_confidence = max(inst.best_confidence, cluster.confidence)
        inst.last_seen_scan = max(inst.last_seen_scan, scan_id)
        inst.map_indices = None
        self._index(inst)

    def update_cluster(self, object_id: int, cluster: Cluster, map_indices: Optional[np.ndarray] = None):
        """Replace an instance's cluster (Layer III refinement) and refit its box."""
        inst = self.instances[object_id]
        inst.cluster = cluster
        inst.map_indices = map_indices
        inst.box = fit_aabb(cluster.points, Frame.WORLD)
        self._index(inst)

    def _absorb(self, keep_id: int, drop_id: int):
        dropped = self.instances.pop(drop_id)
        if self.spatial_index:
            self._hash.remove(drop_id)
        self.merge_into(keep_id, dropped.cluster, dropped.last_seen_scan, dropped.observation_count)

    def _compact(self) -> Dict[int, int]:
        """Renumber ids densely in ascending order; returns old → new."""
        remap = {old: new for new, old in enumerate(sorted(self.instances))}
        if any(old != new for old, new in remap.items()):
            self.instances = {remap[old]: inst for old, inst in self.instances.items()}
            for new, inst in self.instances.items():
                inst.object_id = new
            if self.spatial_index:
                self._hash.rebuild(self._pairing_entries())
        self.next_id = len(self.instances)
        return remap

    def _transitive_pass(self, threshold: float, metric: OverlapMetric, class_agnostic: bool) -> Dict[int, int]:
        """Merge registry pairs over the threshold until none is left; lower id survives."""
        absorbed: Dict[int, int] = {}
        changed = True
        while changed:
            changed = False
            for oid in sorted(self.instances):
                if oid not in self.instances:
                    continue
                inst = self.instances[oid]
                box = self.pairing_box(inst.box)
                for other in self._candidate_ids(box):
                    if other <= oid or other not in self.instances:
                        continue
                    peer = self.instances[other]
                    if not class_agnostic and peer.class_id != inst.class_id:
                        continue
                    if self._ratio(box, self.pairing_box(peer.box), metric) > threshold:
                        self._absorb(oid, other)
                        absorbed[other] = oid
                        changed = True
                        break
                if changed:
                    break
        return absorbed

    def pair_and_merge(
        self,
        new_dets: ScanDetections,
        overlap_threshold: float = 0.3,
        metric: OverlapMetric = OverlapMetric.MIN_RATIO,
        class_agnostic: bool = False,
    ) -> List[Tuple[int, bool]]:
        """Fold one scan's world-frame detections into the registry.

        Returns (object_id, was_merged) per detection, ids as they stand after
        the transitive pass.
        """
        if new_dets.frame != Frame.WORLD:
            raise ValueError(f"expected frame-W detections, got {new_dets.frame.value}")
        outcome: List[Tuple[int, bool]] = []
        for cluster, box in zip(new_dets.clusters, new_dets.boxes):
            match_id, ratio = self.best_match(box, cluster.class_id, metric, class_agnostic)
            if match_id is not None and ratio > overlap_threshold:
                self.merge_into(match_id, cluster, new_dets.scan_id)
                outcome.append((match_id, True))
            else:
                outcome.append((self.insert(cluster, new_dets.scan_id), False))

        absorbed = self._transitive_pass(overlap_threshold, metric, class_agnostic)
        if absorbed:
            logger.debug(f"scan {new_dets.scan_id}: transitive pass merged {len(absorbed)} instance(s)")

        def survivor(oid: int) -> int:
            while oid in absorbed:
                oid = absorbed[oid]
            return oid

        remap = self._compact()
        return [(remap[survivor(oid)], merged) for oid, merged in outcome]

    def touched(self, scan_id: int) -> List[int]:
        return [oid for oid in sorted(self.instances) if self.instances[oid].last_seen_scan == scan_id]

    def snapshot(self) -> List[ObjectSnapshot]:
        return registry_snapshot(self)


def registry_snapshot(registry: ObjectRegistry) -> List[ObjectSnapshot]:
    return [
        ObjectSnapshot(
            object_id=inst.object_id,
            class_id=inst.class_id,
            box=inst.box,
            centroid=inst.centroid.copy(),
            observation_count=inst.observation_count,
            point_count=len(inst.cluster),
            best_confidence=inst.best_confidence,
        )
        for inst in registry
    ]


def pair_and_merge(
    registry: ObjectRegistry,
    new_dets: ScanDetections,
    overlap_threshold: float = 0.3,
    metric: OverlapMetric = OverlapMetric.MIN_RATIO,
    class_agnostic: bool = False,
) -> List[Tuple[int, bool]]:
    return registry.pair_and_merge(new_dets, overlap_threshold, metric, class_agnostic)
