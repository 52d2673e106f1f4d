"""Conversion of KITTI object/odometry `calib` files into the native camera model."""

import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from src.dataset.readers import _open_text
from src.errors import InputError
from src.geometry.frames import orthonormalize
from src.types import CameraModel, Frame, RigidTransform

logger = logging.getLogger(__name__)

KITTI_IMAGE_SIZE = (1242, 375)
VELO_KEYS = ("Tr_velo_to_cam", "Tr_velo_cam")
RECT_KEYS = ("R0_rect", "R_rect")


def _read_kitti_lines(path: Path) -> Dict[str, List[float]]:
    text = _open_text(path)
    values: Dict[str, List[float]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise InputError(path, "line has no key", location=f"line {lineno}", expected="'key: values'")
        key, _, rest = line.partition(":")
        try:
            values[key.strip()] = [float(t) for t in rest.split()]
        except ValueError:
            raise InputError(path, f"cannot parse numbers for {key.strip()!r}", location=f"line {lineno}")
    return values


def _pick(path: Path, values: Dict[str, List[float]], keys, arity: int) -> np.ndarray:
    for key in keys:
        if key in values:
            if len(values[key]) != arity:
                raise InputError(path, f"{key} has {len(values[key])} value(s)", expected=f"{arity} reals")
            return np.asarray(values[key], dtype=np.float64)
    raise InputError(path, f"missing key {keys[0]!r}", expected=" or ".join(keys))


def convert_kitti_calib(
    path: Union[str, Path],
    projection_key: str = "P2",
    width: int = KITTI_IMAGE_SIZE[0],
    height: int = KITTI_IMAGE_SIZE[1],
) -> CameraModel:
    """Fold P, R0_rect and Tr_velo_to_cam into one K·[R|t].

    R = R0_rect·R_velo and t = R0_rect·t_velo + K⁻¹·P[:, 3], so the stereo
    baseline of the chosen camera ends up in the extrinsics.
    """
    path = Path(path)
    values = _read_kitti_lines(path)
    proj = _pick(path, values, (projection_key,), 12).reshape(3, 4)
    rect = _pick(path, values, RECT_KEYS, 9).reshape(3, 3)
    velo = _pick(path, values, VELO_KEYS, 12).reshape(3, 4)

    k = proj[:, :3]
    if abs(k[2, 2]) < 1e-12 or abs(k[1, 0]) > 1e-9 or abs(k[2, 0]) > 1e-9 or abs(k[2, 1]) > 1e-9:
        raise InputError(path, f"{projection_key} is not an upper-triangular camera matrix")
    k = k / k[2, 2]
    try:
        baseline = np.linalg.solve(k, proj[:, 3] / proj[2, 2])
    except np.linalg.LinAlgError:
        raise InputError(path, f"{projection_key} has a singular camera matrix")

    try:
        rot = orthonormalize(rect @ velo[:, :3])
    except ValueError as e:
        raise InputError(path, str(e), expected="a proper rotation in R0_rect and Tr_velo_to_cam")
    trans = rect @ velo[:, 3] + baseline

    logger.debug(f"{path}: {projection_key} baseline offset {baseline.round(4).tolist()}")
    try:
        return CameraModel(
            fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]),
            width=width, height=height,
            extrinsics=RigidTransform(rot, trans, Frame.LIDAR, Frame.CAMERA),
        )
    except ValueError as e:
        raise InputError(path, str(e), location=projection_key, expected="positive focal lengths")
