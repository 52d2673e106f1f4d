"""
Record schemas for every file that crosses the pipeline boundary. They are the single
source of truth for detection records, manifests, ground truth and the
registry export. Readers validate against these models, writers dump them.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from src.types import NUM_CLASSES, NUM_PROTOTYPES


# ── Detection records ────────────────────────────────────────────────────────

class DecodedDetectionRecord(BaseModel):
    box: List[float] = Field(description="x1 y1 x2 y2 in pixels", min_length=4, max_length=4)
    class_id: int = Field(ge=0, lt=NUM_CLASSES)
    confidence: float = Field(ge=0.0, le=1.0)
    rle: List[int] = Field(description="alternating false/true run lengths, row-major, starting with false")

    @field_validator("rle")
    @classmethod
    def _non_negative_runs(cls, runs: List[int]) -> List[int]:
        if any(r < 0 for r in runs):
            raise ValueError("RLE run lengths must be non-negative")
        return runs


class RawDetectionRecord(BaseModel):
    cx: float
    cy: float
    w: float = Field(gt=0.0)
    h: float = Field(gt=0.0)
    class_confidences: List[float] = Field(min_length=NUM_CLASSES, max_length=NUM_CLASSES)
    mask_weights: List[float] = Field(min_length=NUM_PROTOTYPES, max_length=NUM_PROTOTYPES)


class DecodedFrameRecord(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    detections: List[DecodedDetectionRecord] = Field(default_factory=list)


class RawFrameRecord(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    detections: List[RawDetectionRecord] = Field(default_factory=list)


# ── Sequence manifest ────────────────────────────────────────────────────────

class ScanRecord(BaseModel):
    scan_id: int = Field(ge=0)
    scan: str
    detections: Optional[str] = None
    protos: Optional[str] = None
    pose_index: int = Field(ge=0)


class ManifestRecord(BaseModel):
    calibration: str
    poses: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    detection_mode: Literal["raw", "decoded"] = "decoded"
    ground_truth: Optional[str] = None
    scans: List[ScanRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _increasing_scan_ids(self) -> "ManifestRecord":
        ids = [s.scan_id for s in self.scans]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"scan_ids must be strictly increasing, got {ids}")
        return self


# ── Ground truth ─────────────────────────────────────────────────────────────

class GroundTruthRecord(BaseModel):
    scan_id: Optional[int] = Field(default=None, description="null marks a global (whole-sequence) box")
    class_id: int = Field(ge=0)
    min: List[float] = Field(min_length=3, max_length=3)
    max: List[float] = Field(min_length=3, max_length=3)

    @model_validator(mode="after")
    def _ordered_corners(self) -> "GroundTruthRecord":
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"min {self.min} exceeds max {self.max}")
        return self


# ── Registry export ──────────────────────────────────────────────────────────

REGISTRY_FIELDS = [
    "object_id", "class_id", "class_name",
    "centroid_x", "centroid_y", "centroid_z",
    "min_x", "min_y", "min_z",
    "max_x", "max_y", "max_z",
    "observation_count", "point_count", "best_confidence",
]

EXPORT_PRECISION = 6


class RegistryRecord(BaseModel):
    object_id: int = Field(ge=0)
    class_id: int = Field(ge=0)
    class_name: str = ""
    centroid_x: float
    centroid_y: float
    centroid_z: float
    min_x: float
    min_y: float
    min_z: float
    max_x: float
    max_y: float
    max_z: float
    observation_count: int = Field(ge=1)
    point_count: int = Field(ge=0)
    best_confidence: float = Field(ge=0.0, le=1.0)


# ── Class taxonomy ───────────────────────────────────────────────────────────

COCO_CLASS_NAMES = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign", "parking meter", "bench",
    "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup",
    "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
]

assert len(COCO_CLASS_NAMES) == NUM_CLASSES


def class_name(class_id: int, names: Optional[List[str]] = None) -> str:
    table = names or COCO_CLASS_NAMES
    if 0 <= class_id < len(table):
        return table[class_id]
    return f"class_{class_id}"
