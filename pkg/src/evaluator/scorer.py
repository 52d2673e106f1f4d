import logging
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from src.geometry.frames import enclosed_fraction, overlap_ratio
from src.models import class_name
from src.types import (
    Aabb3, ClassScore, DetectionCategory, EvalReport, GroundTruthBox,
    ObjectSnapshot, OverlapMetric,
)

logger = logging.getLogger(__name__)

PARTIAL_COVERAGE = 0.5  # matched boxes enclosing less of the ground truth count as partial


def iou_matrix(pred: Sequence[Aabb3], gt: Sequence[Aabb3]) -> np.ndarray:
    out = np.zeros((len(gt), len(pred)))
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            out[i, j] = overlap_ratio(p, g, OverlapMetric.IOU)
    return out


def greedy_match(iou: np.ndarray) -> List[Tuple[int, int]]:
    """One-to-one (gt, pred) pairs by descending IoU; equal IoUs keep (gt, pred) index order."""
    gi, pj = np.nonzero(iou > 0.0)
    order = np.lexsort((pj, gi, -iou[gi, pj]))
    used_gt, used_pred, pairs = set(), set(), []
    for k in order:
        g, p = int(gi[k]), int(pj[k])
        if g in used_gt or p in used_pred:
            continue
        used_gt.add(g)
        used_pred.add(p)
        pairs.append((g, p))
    return pairs


def hungarian_match(iou: np.ndarray) -> List[Tuple[int, int]]:
    """Assignment maximising total IoU; zero-overlap assignments are dropped."""
    if iou.size == 0:
        return []
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return [(int(g), int(p)) for g, p in zip(rows, cols) if iou[g, p] > 0.0]


class GroundTruthScorer:
    """Scores registry snapshots against ground-truth boxes class by class."""

    def __init__(
        self,
        ground_truth: Iterable[GroundTruthBox],
        class_map: Optional[Dict[int, int]] = None,
        class_names: Optional[List[str]] = None,
        hungarian: bool = False,
    ):
        self.ground_truth = list(ground_truth)
        self.class_map = class_map or {}
        self.class_names = class_names
        self.hungarian = hungarian

    def _gt_class(self, detector_class: int) -> int:
        return self.class_map.get(detector_class, detector_class)

    def evaluate(self, pred: Iterable[ObjectSnapshot]) -> EvalReport:
        pred = list(pred)
        gt_by_class: Dict[int, List[GroundTruthBox]] = {}
        for g in self.ground_truth:
            gt_by_class.setdefault(g.class_id, []).append(g)
        pred_by_class: Dict[int, List[ObjectSnapshot]] = {}
        for p in pred:
            pred_by_class.setdefault(self._gt_class(p.class_id), []).append(p)

        scores: List[ClassScore] = []
        categories: Counter = Counter({c.value: 0 for c in DetectionCategory})
        matched_total = 0
        for cid in sorted(gt_by_class):
            gts = gt_by_class[cid]
            preds = pred_by_class.get(cid, [])
            iou = iou_matrix([p.box for p in preds], [g.box for g in gts])
            pairs = hungarian_match(iou) if self.hungarian else greedy_match(iou)

            score = ClassScore(
                class_id=cid,
                class_name=class_name(cid, self.class_names),
                iou=float(sum(iou[g, p] for g, p in pairs) / len(gts)),
                gt_count=len(gts),
                matched=len(pairs),
            )
            for g, p in pairs:
                if enclosed_fraction(preds[p].box, gts[g].box) < PARTIAL_COVERAGE:
                    score.partial += 1
                else:
                    score.detected += 1
            score.missed = len(gts) - len(pairs)
            categories[DetectionCategory.DETECTED.value] += score.detected
            categories[DetectionCategory.PARTIAL.value] += score.partial
            categories[DetectionCategory.MISSED.value] += score.missed
            matched_total += len(pairs)
            scores.append(score)

        miou = 100.0 * float(np.mean([s.iou for s in scores])) if scores else 0.0
        report = EvalReport(
            class_scores=scores,
            miou=miou,
            matched=matched_total,
            unmatched_gt=len(self.ground_truth) - matched_total,
            unmatched_pred=len(pred) - matched_total,
            category_counts=dict(categories),
        )
        logger.debug(
            f"eval: {len(pred)} predictions vs {len(self.ground_truth)} ground-truth boxes, "
            f"mIoU {miou:.2f}"
        )
        return report


def match_and_score(
    pred: Iterable[ObjectSnapshot],
    gt: Iterable[GroundTruthBox],
    hungarian: bool = False,
    class_map: Optional[Dict[int, int]] = None,
    class_names: Optional[List[str]] = None,
) -> EvalReport:
    return GroundTruthScorer(gt, class_map, class_names, hungarian).evaluate(pred)
