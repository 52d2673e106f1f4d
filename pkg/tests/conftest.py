from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from src.config import Config, RunConfig
from src.dataset.readers import read_manifest
from src.pipeline.runner import Box3DRunner, RunResult
from src.pipeline.synthetic import LIDAR_TO_CAMERA, SyntheticSequence, SyntheticSpec, generate_synthetic_sequence
from src.types import Aabb3, CameraModel, Cluster, Frame, RigidTransform


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def forward_camera() -> CameraModel:
    """640x480 camera looking down LiDAR +x."""
    return CameraModel(
        fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480,
        extrinsics=RigidTransform(LIDAR_TO_CAMERA, np.zeros(3), Frame.LIDAR, Frame.CAMERA),
    )


def box_corners(lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return Aabb3(lo, hi).corners()


def world_cluster(lo, hi, class_id: int = 2, confidence: float = 0.9) -> Cluster:
    return Cluster(box_corners(lo, hi), Frame.WORLD, class_id, confidence)


@pytest.fixture
def make_sequence(tmp_path: Path) -> Callable[..., SyntheticSequence]:
    def _make(name: str = "seq", **overrides) -> SyntheticSequence:
        return generate_synthetic_sequence(SyntheticSpec.parse(overrides), tmp_path / name)
    return _make


@pytest.fixture
def run_sequence(tmp_path: Path) -> Callable[..., RunResult]:
    def _run(seq: SyntheticSequence, output: str = None, **run_overrides) -> RunResult:
        config = Config(run=RunConfig.parse(run_overrides))
        out_dir = tmp_path / output if output else None
        return Box3DRunner(config).run(read_manifest(seq.manifest_path), output_dir=out_dir)
    return _run
