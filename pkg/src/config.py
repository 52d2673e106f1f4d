import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import ConfigError
from src.types import OverlapMetric


class RunConfig(BaseModel):
    """Every pipeline tunable with its default; ranges are enforced at parse time."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Layer I: detection decoding
    conf_threshold: float = Field(0.25, ge=0.0, le=1.0)
    nms_iou: float = Field(0.45, ge=0.0, le=1.0)
    bin_threshold: float = Field(0.5, ge=0.0, le=1.0)
    erosion_radius: int = Field(1, ge=0)
    erosion_iterations: int = Field(1, ge=0)

    # Layer I: clustering
    cluster_tolerance: float = Field(0.5, gt=0.0)  # meters
    min_cluster_size: int = Field(5, ge=1)

    # Layer II: pairing and merging
    overlap_metric: OverlapMetric = OverlapMetric.MIN_RATIO
    overlap_threshold: float = Field(0.3, ge=0.0, le=1.0)
    class_agnostic_merge: bool = False
    spatial_index: bool = True  # False = linear-scan registry lookup

    # Layer III: global map
    voxel_size: float = Field(0.2, gt=0.0)  # r, meters
    map_leaf: float = Field(0.1, ge=0.0)    # 0 disables map downsampling
    refresh_period: int = Field(10, ge=0)   # 0 disables refresh of untouched instances
    refine_to_fixpoint: bool = False
    enable_refinement: bool = True

    # Evaluation
    hungarian: bool = False

    def provenance(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    @classmethod
    def parse(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        merged = self.model_dump()
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.parse(merged)


@dataclass
class Config:
    output_dir: Path = Path("results")
    log_level: str = "INFO"
    class_names_path: Optional[Path] = None
    run: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def from_env(cls, env_file: str = ".env") -> "Config":
        load_dotenv(env_file)
        overrides = {}
        for name in RunConfig.model_fields:
            raw = os.getenv(f"BOX3D_{name.upper()}")
            if raw is not None:
                overrides[name] = raw
        class_names = os.getenv("BOX3D_CLASS_NAMES", "")
        return cls(
            output_dir=Path(os.getenv("BOX3D_OUTPUT_DIR", "results")),
            log_level=os.getenv("BOX3D_LOG_LEVEL", "INFO"),
            class_names_path=Path(class_names) if class_names else None,
            run=RunConfig.parse(overrides),
        )

    def validate(self):
        """Validate process-level settings that pydantic does not cover."""
        errors = []
        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            errors.append(f"BOX3D_LOG_LEVEL must be DEBUG/INFO/WARNING/ERROR, got {self.log_level}")
        if self.class_names_path is not None and not self.class_names_path.exists():
            errors.append(f"BOX3D_CLASS_NAMES file not found: {self.class_names_path}")
        if errors:
            raise ConfigError("Invalid settings:\n  " + "\n  ".join(errors))
