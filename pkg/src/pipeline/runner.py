import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from src.config import Config
from src.dataset.readers import (
    read_calibration, read_class_map, read_class_names, read_detections,
    read_ground_truth, read_poses, read_scan,
)
from src.dataset.writers import write_clusters_ply, write_eval_report, write_map_ply, write_registry
from src.detection.decode import decode_detections, filter_detections
from src.errors import InputError
from src.evaluator.scorer import GroundTruthScorer
from src.geometry.frames import transform_cloud
from src.layers.boxgen import generate_boxes
from src.layers.global_map import GlobalMap, refine_registry
from src.layers.merge import ObjectRegistry, to_world
from src.types import (
    CameraModel, Detection2D, DetectionMode, EvalReport, FrameDetections,
    GroundTruthBox, LayerTiming, ObjectSnapshot, Pose, ScanDetections,
    ScanEntry, SequenceManifest,
)

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    registry: ObjectRegistry
    global_map: GlobalMap
    timing: LayerTiming
    report: Optional[EvalReport] = None
    scan_reports: Dict[int, EvalReport] = field(default_factory=dict)
    exports: Dict[str, Path] = field(default_factory=dict)


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def scan_snapshots(dets: ScanDetections) -> List[ObjectSnapshot]:
    """Per-scan Layer I boxes dressed as registry snapshots for scoring."""
    return [
        ObjectSnapshot(
            object_id=i,
            class_id=c.class_id,
            box=box,
            centroid=c.points.mean(axis=0),
            observation_count=1,
            point_count=len(c),
            best_confidence=c.confidence,
        )
        for i, (c, box) in enumerate(zip(dets.clusters, dets.boxes))
    ]


class Box3DRunner:
    """Runs the three layers over a sequence, scan by scan, in manifest order."""

    def __init__(self, config: Config):
        self.config = config
        self.run_config = config.run
        self.class_names = read_class_names(config.class_names_path) if config.class_names_path else None

    def _decode(self, frame: Optional[FrameDetections], cam: CameraModel) -> List[Detection2D]:
        rc = self.run_config
        if frame is None:
            return []
        if frame.mode == DetectionMode.RAW:
            return decode_detections(
                frame.raw, frame.protos, cam.width, cam.height,
                conf_threshold=rc.conf_threshold,
                iou_threshold=rc.nms_iou,
                bin_threshold=rc.bin_threshold,
                erosion_radius=rc.erosion_radius,
                erosion_iterations=rc.erosion_iterations,
            )
        return filter_detections(frame.decoded, rc.conf_threshold)

    def _pose(self, entry: ScanEntry, poses: List[Pose], poses_path: Path) -> Pose:
        if entry.pose_index >= len(poses):
            raise InputError(
                poses_path, f"scan {entry.scan_id} wants pose row {entry.pose_index}",
                expected=f"a row index below {len(poses)}",
            )
        return Pose(scan_id=entry.scan_id, T_WL=poses[entry.pose_index].T_WL)

    def run(
        self,
        manifest: SequenceManifest,
        output_dir: Optional[Path] = None,
        write_ply: bool = False,
        class_map: Optional[Dict[int, int]] = None,
        per_scan_eval: bool = False,
    ) -> RunResult:
        rc = self.run_config
        cam = read_calibration(manifest.calibration_path)
        if (cam.width, cam.height) != (manifest.width, manifest.height):
            raise InputError(
                manifest.calibration_path, f"camera is {cam.width}x{cam.height}",
                expected=f"{manifest.width}x{manifest.height} as declared in the manifest",
            )
        poses = read_poses(manifest.poses_path)
        ground_truth: List[GroundTruthBox] = (
            read_ground_truth(manifest.ground_truth_path) if manifest.ground_truth_path else []
        )

        registry = ObjectRegistry(spatial_index=rc.spatial_index, min_extent=rc.cluster_tolerance)
        global_map = GlobalMap(r=rc.voxel_size, leaf_size=rc.map_leaf)
        timing = LayerTiming()
        result = RunResult(registry=registry, global_map=global_map, timing=timing)
        total = len(manifest.scans)

        for index, entry in enumerate(manifest.scans):
            # inputs are loaded before the clock starts
            scan = read_scan(entry.scan_path)
            pose = self._pose(entry, poses, manifest.poses_path)
            frame = None
            if entry.detections_path is not None:
                frame = read_detections(
                    entry.detections_path, manifest.detection_mode, entry.protos_path,
                    manifest.width, manifest.height,
                )
            else:
                logger.warning(f"scan {entry.scan_id}: no detection record, treating as zero detections")

            start = time.perf_counter()

            t = time.perf_counter()
            detections = self._decode(frame, cam)
            scan_dets = generate_boxes(
                scan, cam, detections, rc.cluster_tolerance, rc.min_cluster_size, entry.scan_id,
            )
            timing.layer1_ms.append(_ms(t))

            t = time.perf_counter()
            world_dets = to_world(scan_dets, pose)
            registry.pair_and_merge(world_dets, rc.overlap_threshold, rc.overlap_metric, rc.class_agnostic_merge)
            timing.layer2_ms.append(_ms(t))

            t = time.perf_counter()
            global_map.integrate_scan(transform_cloud(scan, pose.T_WL))
            if rc.enable_refinement:
                refine_registry(
                    global_map, registry, entry.scan_id, index, rc.refresh_period, rc.refine_to_fixpoint,
                )
            timing.layer3_ms.append(_ms(t))

            timing.total_ms.append(_ms(start))

            if per_scan_eval:
                rows = [g for g in ground_truth if g.scan_id == entry.scan_id]
                if rows:
                    scorer = GroundTruthScorer(rows, class_map, self.class_names, rc.hungarian)
                    result.scan_reports[entry.scan_id] = scorer.evaluate(scan_snapshots(world_dets))

            logger.info(
                f"scan {index + 1}/{total}: {len(detections)} detections, "
                f"{len(scan_dets.clusters)} clusters, registry {len(registry)}"
            )

        global_gt = [g for g in ground_truth if g.is_global]
        if global_gt:
            scorer = GroundTruthScorer(global_gt, class_map, self.class_names, rc.hungarian)
            result.report = scorer.evaluate(registry.snapshot())
            result.report.timing = timing

        if output_dir is not None:
            self.save_results(result, output_dir, write_ply)
        return result

    def save_results(self, result: RunResult, output_dir: Path, write_ply: bool = False):
        output_dir = Path(output_dir)
        provenance = self.run_config.provenance()
        result.exports["registry"] = write_registry(
            result.registry.snapshot(), output_dir / "registry.csv", provenance, self.class_names,
        )
        if result.report is not None:
            result.exports["eval"] = write_eval_report(result.report, output_dir / "eval.json", provenance)
        if write_ply:
            result.exports["map_ply"] = write_map_ply(
                result.global_map.points, list(result.registry), output_dir / "map.ply",
            )
            result.exports["clusters_ply"] = write_clusters_ply(result.registry, output_dir / "clusters.ply")
            logger.info(f"  PLY: {result.exports['map_ply']}, {result.exports['clusters_ply']}")


def run_pipeline(
    manifest: SequenceManifest,
    config: Config,
    output_dir: Optional[Path] = None,
    write_ply: bool = False,
    class_map_path: Optional[Path] = None,
    per_scan_eval: bool = False,
) -> RunResult:
    class_map = read_class_map(class_map_path) if class_map_path else None
    return Box3DRunner(config).run(manifest, output_dir, write_ply, class_map, per_scan_eval)
