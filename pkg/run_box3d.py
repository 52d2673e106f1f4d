#!/usr/bin/env python3
"""
BOX3D: three-layer camera-LiDAR fusion over a scan sequence.

Usage:
    # Run the three layers over a sequence and score the registry
    python run_box3d.py run --manifest data/seq/manifest.json --ply

    # Layer-II-only ablation with the linear-scan registry
    python run_box3d.py run --manifest data/seq/manifest.json --no-refine --no-spatial-index

    # Score an exported registry against ground truth
    python run_box3d.py eval --registry results/registry.csv --ground-truth data/seq/gt.jsonl

    # Registry boxes as JSON lines or as a PLY of box corners
    python run_box3d.py export --registry results/registry.csv --format ply --output boxes.ply

    # Synthetic 10-scan sequence with 30% of the scans lacking detections
    python run_box3d.py synth --output-dir data/synth --dropout 0.3 --seed 7

    # KITTI calib file to the native calibration format
    python run_box3d.py convert-kitti-calib --input 000000.txt --output calib.txt --camera P2

Exit codes: 0 success, 1 input error, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from enum import Enum
from pathlib import Path

from pydantic import ValidationError

from src.config import Config, RunConfig
from src.dataset.kitti import KITTI_IMAGE_SIZE, convert_kitti_calib
from src.dataset.readers import (
    read_class_map, read_class_names, read_ground_truth, read_manifest,
    read_registry, snapshot_from_record,
)
from src.dataset.writers import (
    write_box_corners_ply, write_calibration, write_eval_report, write_registry_jsonl,
)
from src.errors import ConfigError, InputError
from src.evaluator.scorer import match_and_score
from src.pipeline.runner import Box3DRunner
from src.pipeline.summary import print_eval, print_summary
from src.pipeline.synthetic import SyntheticSpec, generate_synthetic_sequence


def setup_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def _add_run_config_flags(parser: argparse.ArgumentParser):
    """One flag per RunConfig field; unset flags keep the env/default value."""
    grp = parser.add_argument_group("pipeline tunables")
    for name, info in RunConfig.model_fields.items():
        flag = "--" + name.replace("_", "-")
        help_text = f"default: {info.default.value if isinstance(info.default, Enum) else info.default}"
        if info.annotation is bool:
            grp.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        elif isinstance(info.default, Enum):
            grp.add_argument(flag, dest=name, choices=[m.value for m in type(info.default)], default=None, help=help_text)
        else:
            grp.add_argument(flag, dest=name, type=info.annotation, default=None, help=help_text)
    grp.add_argument(
        "--no-refine", dest="enable_refinement", action="store_false", default=None,
        help="Skip Layer III refinement (Layer-II-only ablation)",
    )


def _load_config(args) -> Config:
    config = Config.from_env(str(args.env_file))
    if getattr(args, "output_dir", None) is not None:
        config.output_dir = args.output_dir
    if getattr(args, "class_names", None) is not None:
        config.class_names_path = args.class_names
    overrides = {name: getattr(args, name, None) for name in RunConfig.model_fields}
    config.run = config.run.with_overrides(**overrides)
    config.validate()
    return config


def cmd_run(args) -> int:
    config = _load_config(args)
    logger = logging.getLogger("box3d")
    manifest = read_manifest(args.manifest)
    logger.info(f"Sequence: {len(manifest.scans)} scans, {manifest.detection_mode.value} detections")
    logger.info(f"  Config: {json.dumps(config.run.provenance(), sort_keys=True)}")

    class_map = read_class_map(args.class_map) if args.class_map else None
    runner = Box3DRunner(config)
    result = runner.run(
        manifest,
        output_dir=config.output_dir,
        write_ply=args.ply,
        class_map=class_map,
        per_scan_eval=args.per_scan_eval,
    )
    print_summary(result.timing, len(manifest.scans), len(result.registry), result.report)
    for scan_id, report in sorted(result.scan_reports.items()):
        print(f"  scan {scan_id}: Layer I mIoU {report.miou:.1f} ({report.matched} matched)")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    records, provenance = read_registry(args.registry)
    gt = [g for g in read_ground_truth(args.ground_truth) if g.is_global]
    class_map = read_class_map(args.class_map) if args.class_map else None
    class_names = read_class_names(config.class_names_path) if config.class_names_path else None
    report = match_and_score(
        [snapshot_from_record(r) for r in records], gt,
        hungarian=config.run.hungarian, class_map=class_map, class_names=class_names,
    )
    print_eval(report)
    if args.output:
        write_eval_report(report, args.output, provenance or config.run.provenance())
    return 0


def cmd_export(args) -> int:
    records, _ = read_registry(args.registry)
    if args.format == "ply":
        write_box_corners_ply(records, args.output)
    else:
        write_registry_jsonl(records, args.output)
    print(f"Exported {len(records)} object(s) to {args.output}")
    return 0


def cmd_synth(args) -> int:
    values = {
        "num_objects": args.objects,
        "num_scans": args.scans,
        "noise_sigma": args.noise,
        "dropout": args.dropout,
        "dropout_scans": args.dropout_scans,
        "undetected_objects": args.undetected or [],
        "mask_coverage": args.coverage,
        "detection_mode": args.mode,
        "sample_spacing": args.spacing,
        "per_scan_ground_truth": args.per_scan_gt,
        "seed": args.seed,
    }
    spec = SyntheticSpec.parse({k: v for k, v in values.items() if v is not None})
    seq = generate_synthetic_sequence(spec, args.output_dir)
    print(f"Manifest: {seq.manifest_path}")
    print(f"Objects: {len([g for g in seq.ground_truth if g.is_global])}, dropped scans: {seq.dropped_scans}")
    return 0


def cmd_convert(args) -> int:
    cam = convert_kitti_calib(args.input, args.camera, args.width, args.height)
    write_calibration(cam, args.output)
    print(f"Calibration: {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="BOX3D camera-LiDAR fusion pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--env-file", type=Path, default=Path(".env"))
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the three layers over a sequence")
    run.add_argument("--manifest", type=Path, required=True, help="Sequence manifest JSON")
    run.add_argument("--output-dir", type=Path, default=None, help="Where exports go (default: BOX3D_OUTPUT_DIR or results)")
    run.add_argument("--ply", action="store_true", help="Also write the global map and the registry clusters as PLY, objects colored")
    run.add_argument("--class-map", type=Path, help="JSON mapping detector class ids to ground-truth ids")
    run.add_argument("--class-names", type=Path, help="One class name per line")
    run.add_argument("--per-scan-eval", action="store_true", help="Score per-scan Layer I boxes against per-scan ground truth")
    _add_run_config_flags(run)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="Score a registry export against ground truth")
    ev.add_argument("--registry", type=Path, required=True)
    ev.add_argument("--ground-truth", type=Path, required=True)
    ev.add_argument("--class-map", type=Path)
    ev.add_argument("--class-names", type=Path)
    ev.add_argument("--output", type=Path, help="Write the eval record as JSON")
    _add_run_config_flags(ev)
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export", help="Convert a registry export to JSON lines or a box-corner PLY")
    ex.add_argument("--registry", type=Path, required=True)
    ex.add_argument("--format", choices=["jsonl", "ply"], default="jsonl")
    ex.add_argument("--output", type=Path, required=True)
    ex.set_defaults(func=cmd_export)

    syn = sub.add_parser("synth", help="Generate a synthetic sequence with ground truth")
    syn.add_argument("--output-dir", type=Path, required=True)
    syn.add_argument("--objects", type=int)
    syn.add_argument("--scans", type=int)
    syn.add_argument("--noise", type=float, help="Point noise sigma in meters")
    syn.add_argument("--dropout", type=float, help="Fraction of scans without detections")
    syn.add_argument("--dropout-scans", type=int, nargs="+", help="Explicit scans without detections")
    syn.add_argument("--undetected", type=int, nargs="+", help="Objects the detector never reports")
    syn.add_argument("--coverage", type=float, help="Mask area fraction kept per object")
    syn.add_argument("--mode", choices=["decoded", "raw"])
    syn.add_argument("--spacing", type=float, help="Surface sample spacing in meters")
    syn.add_argument("--per-scan-gt", action="store_true", default=None)
    syn.add_argument("--seed", type=int)
    syn.set_defaults(func=cmd_synth)

    cv = sub.add_parser("convert-kitti-calib", help="Convert a KITTI calib file to the native format")
    cv.add_argument("--input", type=Path, required=True)
    cv.add_argument("--output", type=Path, required=True)
    cv.add_argument("--camera", default="P2", help="Projection matrix key (P0..P3)")
    cv.add_argument("--width", type=int, default=KITTI_IMAGE_SIZE[0])
    cv.add_argument("--height", type=int, default=KITTI_IMAGE_SIZE[1])
    cv.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"\nConfiguration error:\n{e}\n", file=sys.stderr)
        return 2
    except (InputError, OSError) as e:
        print(f"\nInput error:\n{e}\n", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
