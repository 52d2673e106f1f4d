from typing import Optional

from src.types import EvalReport, LayerTiming

BAR_WIDTH = 30


def _bar(fraction: float) -> str:
    filled = int(max(0.0, min(1.0, fraction)) * BAR_WIDTH)
    return "█" * filled + "░" * (BAR_WIDTH - filled)


def print_timing(timing: LayerTiming, scans: int, objects: int):
    stats = timing.summary()
    print("\n" + "=" * 70)
    print("  BOX3D RUN SUMMARY")
    print("=" * 70)
    print(f"  Scans processed: {scans}")
    print(f"  Registry size:   {objects}")
    print()

    print("  Time per scan (mean / max):")
    peak = max((s["mean_ms"] for s in stats.values()), default=0.0) or 1.0
    for name, label in (("layer1", "Layer I"), ("layer2", "Layer II"), ("layer3", "Layer III"), ("total", "Total")):
        s = stats[name]
        print(f"    {label:<10} {_bar(s['mean_ms'] / peak)} {s['mean_ms']:9.3f} ms / {s['max_ms']:9.3f} ms")
    print()


def print_eval(report: EvalReport):
    print("  mIoU by class:")
    for s in report.class_scores:
        print(
            f"    {s.class_name:<14} {_bar(s.iou)} {s.iou:6.1%}  "
            f"({s.matched}/{s.gt_count} matched, {s.partial} partial, {s.missed} missed)"
        )
    print()
    print(f"  mIoU:            {report.miou:.1f}")
    print(f"  Matched:         {report.matched}")
    print(f"  Unmatched GT:    {report.unmatched_gt}")
    print(f"  Unmatched pred:  {report.unmatched_pred}")
    counts = report.category_counts
    print(
        f"  Categories:      {counts.get('detected', 0)} detected, "
        f"{counts.get('partial', 0)} partial, {counts.get('missed', 0)} missed"
    )
    print()


def print_summary(timing: LayerTiming, scans: int, objects: int, report: Optional[EvalReport] = None):
    print_timing(timing, scans, objects)
    if report is not None:
        print_eval(report)
