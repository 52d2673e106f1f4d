"""Decode detector head outputs into 2D detections with binary instance masks."""

import logging
from typing import List, Optional

import numpy as np
from scipy import ndimage
from scipy.special import expit

from src.types import Box2D, BinaryMask, Detection2D, PrototypeSet, RawDetection

logger = logging.getLogger(__name__)


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(raw: List[RawDetection], conf_threshold: float, iou_threshold: float) -> List[RawDetection]:
    """Greedy per-class Non-Maximum Suppression.

    Class and score come from the argmax of the class confidences. Output is
    sorted by descending score; equal scores keep input order.
    """
    if not raw:
        return []
    scores = np.array([d.score for d in raw])
    candidates = [i for i in np.argsort(-scores, kind="stable") if scores[i] >= conf_threshold]

    kept: List[int] = []
    for i in candidates:
        det = raw[i]
        suppressed = any(
            raw[k].class_id == det.class_id and iou_2d(raw[k].box, det.box) > iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(i)
    return [raw[i] for i in kept]


def _resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False), edges clamped."""
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, in_h - 1), np.clip(xs, 0, in_w - 1), indexing="ij")
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")


def _box_window(box: Box2D, frame_w: int, frame_h: int) -> np.ndarray:
    clamped = box.clamp(frame_w, frame_h)
    cols = np.arange(frame_w)
    rows = np.arange(frame_h)
    in_x = (cols >= clamped.x1) & (cols < clamped.x2)
    in_y = (rows >= clamped.y1) & (rows < clamped.y2)
    return in_y[:, None] & in_x[None, :]


def assemble_mask(
    weights: np.ndarray,
    protos: PrototypeSet,
    box: Box2D,
    frame_w: int,
    frame_h: int,
    bin_threshold: float = 0.5,
) -> BinaryMask:
    """Weighted prototype sum → sigmoid → bilinear resize → threshold → crop to box."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame size must be positive, got {frame_w}x{frame_h}")
    logits = np.tensordot(np.asarray(weights, dtype=np.float64), protos.maps, axes=1)
    probs = expit(logits)
    if probs.shape != (frame_h, frame_w):
        probs = _resize_bilinear(probs, frame_h, frame_w)
    mask = (probs > bin_threshold) & _box_window(box, frame_w, frame_h)
    return BinaryMask(mask)


def erode(mask: BinaryMask, kernel_radius: int = 1, iterations: int = 1) -> BinaryMask:
    """Binary erosion with a square element of side 2·radius+1; the image border erodes."""
    if kernel_radius < 0 or iterations < 0:
        raise ValueError("kernel_radius and iterations must be non-negative")
    if kernel_radius == 0 or iterations == 0 or not mask.data.any():
        return mask
    structure = np.ones((2 * kernel_radius + 1, 2 * kernel_radius + 1), dtype=bool)
    # scipy treats iterations < 1 as "until stable", so zero is handled above
    eroded = ndimage.binary_erosion(mask.data, structure=structure, iterations=iterations, border_value=0)
    return BinaryMask(eroded)


def decode_detections(
    raw: List[RawDetection],
    protos: PrototypeSet,
    frame_w: int,
    frame_h: int,
    conf_threshold: float = 0.25,
    iou_threshold: float = 0.45,
    bin_threshold: float = 0.5,
    erosion_radius: int = 1,
    erosion_iterations: int = 1,
) -> List[Detection2D]:
    """Full decoding of one frame: NMS, mask assembly and erosion, in NMS score order."""
    kept = nms(raw, conf_threshold, iou_threshold)
    detections = []
    for det in kept:
        box = det.box.clamp(frame_w, frame_h)
        mask = assemble_mask(det.mask_weights, protos, det.box, frame_w, frame_h, bin_threshold)
        mask = erode(mask, erosion_radius, erosion_iterations)
        detections.append(Detection2D(box=box, class_id=det.class_id, confidence=det.score, mask=mask))
    logger.debug(f"decoded {len(detections)}/{len(raw)} raw detections")
    return detections


def filter_detections(detections: List[Detection2D], conf_threshold: float) -> List[Detection2D]:
    """Drop pre-decoded detections under the threshold and order them by descending confidence."""
    kept = [d for d in detections if d.confidence >= conf_threshold]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].confidence, i))
    return [kept[i] for i in order]


# ── Run-length encoding ──────────────────────────────────────────────────────

def rle_decode(runs: List[int], width: int, height: int) -> Optional[BinaryMask]:
    """Expand alternating false/true runs (row-major, false first). None when runs do not sum to width×height."""
    total = width * height
    if sum(runs) != total:
        return None
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return BinaryMask(flat.reshape(height, width))


def rle_encode(mask: BinaryMask) -> List[int]:
    flat = mask.data.reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]
