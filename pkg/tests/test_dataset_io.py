import json
import logging

import numpy as np
import pytest

from src.dataset.kitti import convert_kitti_calib
from src.dataset.readers import (
    PROTOS_BYTES, read_calibration, read_class_map, read_class_names, read_detections,
    read_ground_truth, read_manifest, read_poses, read_registry, read_scan, snapshot_from_record,
)
from src.dataset.writers import (
    object_color, write_box_corners_ply, write_calibration, write_decoded_detections,
    write_ground_truth, write_manifest, write_map_ply, write_ply, write_poses,
    write_raw_detections, write_registry, write_scan,
)
from src.errors import InputError
from src.geometry.frames import project_point, yaw_transform
from src.models import REGISTRY_FIELDS, ManifestRecord, ScanRecord
from src.types import (
    NUM_CLASSES, NUM_PROTOTYPES, PROTO_SIZE, Aabb3, BinaryMask, Box2D, Cluster, Detection2D,
    DetectionMode, Frame, GroundTruthBox, ObjectInstance, ObjectSnapshot, Pose, PrototypeSet,
    RawDetection,
)

KITTI_CALIB = """\
P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
Tr_imu_to_velo: 9.999976e-01 7.553071e-04 -2.035826e-03 -8.086759e-01 -7.854027e-04 9.998898e-01 -1.482298e-02 3.195559e-01 2.024406e-03 1.482454e-02 9.998881e-01 -7.997231e-01
"""

IDENTITY_CALIB = "K: 500 500 320 240\nsize: 640 480\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n"


def snapshot(object_id, lo, hi, class_id=2, obs=1) -> ObjectSnapshot:
    box = Aabb3(lo, hi, Frame.WORLD)
    return ObjectSnapshot(object_id, class_id, box, box.center, obs, point_count=8, best_confidence=0.9)


# ── Scans ────────────────────────────────────────────────────────────────────

def test_scan_sizes(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert len(read_scan(empty)) == 0

    one = write_scan([[1.0, 2.0, 3.0]], tmp_path / "one.bin")
    assert one.stat().st_size == 16
    cloud = read_scan(one)
    assert cloud.frame == Frame.LIDAR
    np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0]])

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\0" * 17)
    with pytest.raises(InputError, match="truncated at byte 16") as exc:
        read_scan(bad)
    assert exc.value.path == bad


def test_scan_drops_non_finite_points_with_warning(tmp_path, caplog):
    path = write_scan([[1.0, 0.0, 0.0], [np.nan, 0.0, 0.0], [0.0, np.inf, 0.0]], tmp_path / "nan.bin")
    with caplog.at_level(logging.WARNING):
        cloud = read_scan(path)
    assert len(cloud) == 1
    assert "dropped 2 point(s)" in caplog.text


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="file not found"):
        read_scan(tmp_path / "nope.bin")


# ── Calibration and poses ────────────────────────────────────────────────────

def test_identity_calibration(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text("# comment\n" + IDENTITY_CALIB + "D: 0 0 0 0 0\n")
    cam = read_calibration(path)
    assert (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height) == (500, 500, 320, 240, 640, 480)
    np.testing.assert_allclose(cam.extrinsics.rotation, np.eye(3), atol=1e-12)
    assert project_point(np.array([0.0, 0.0, 10.0]), cam) == pytest.approx((320.0, 240.0))


def test_calibration_written_is_read_back(tmp_path, forward_camera):
    cam = read_calibration(write_calibration(forward_camera, tmp_path / "calib.txt"))
    np.testing.assert_allclose(cam.extrinsics.rotation, forward_camera.extrinsics.rotation, atol=1e-12)
    assert (cam.width, cam.height) == (640, 480)


@pytest.mark.parametrize("text, pattern, line", [
    ("K: 500 500 320 240\nsize: 640 480\nTr: 1 0 0 0 0 1 0 0 0 0 -1 0\n", "improper rotation", "line 3"),
    ("K: 500 500 320 240\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n", "missing key 'size'", None),
    ("K: 500 500 320\nsize: 640 480\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n", "K has 3 value", "line 1"),
    ("K: 500 500 320 240\nK: 1 1 1 1\nsize: 640 480\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n", "duplicate key", "line 2"),
])
def test_bad_calibration(tmp_path, text, pattern, line):
    path = tmp_path / "calib.txt"
    path.write_text(text)
    with pytest.raises(InputError, match=pattern) as exc:
        read_calibration(path)
    assert exc.value.location == line


def test_poses_round_trip_and_errors(tmp_path):
    poses = [Pose(i, yaw_transform(0.1 * i, (float(i), 0.0, 0.0))) for i in range(3)]
    read = read_poses(write_poses(poses, tmp_path / "poses.txt"))
    assert [p.scan_id for p in read] == [0, 1, 2]
    np.testing.assert_allclose(read[2].T_WL.matrix(), poses[2].T_WL.matrix(), atol=1e-12)

    bad = tmp_path / "bad.txt"
    bad.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0\n")
    with pytest.raises(InputError, match="pose has 4 value") as exc:
        read_poses(bad)
    assert exc.value.location == "line 2"


# ── KITTI conversion ─────────────────────────────────────────────────────────

def test_kitti_calib_matches_direct_projection(tmp_path, rng):
    path = tmp_path / "000000.txt"
    path.write_text(KITTI_CALIB)
    cam = convert_kitti_calib(path)
    assert (cam.width, cam.height) == (1242, 375)
    assert cam.fx == pytest.approx(721.5377)

    def row(key):
        line = next(l for l in KITTI_CALIB.splitlines() if l.startswith(key + ":"))
        return np.array([float(v) for v in line.split(":")[1].split()])

    p2 = row("P2").reshape(3, 4)
    r0 = np.eye(4)
    r0[:3, :3] = row("R0_rect").reshape(3, 3)
    tr = np.vstack([row("Tr_velo_to_cam").reshape(3, 4), [0, 0, 0, 1]])
    full = p2 @ r0 @ tr

    pts = np.column_stack([rng.uniform(5, 60, 200), rng.uniform(-10, 10, 200), rng.uniform(-2, 2, 200)])
    for p in pts:
        hom = full @ np.append(p, 1.0)
        px = project_point(p, cam)
        assert px is not None
        assert px.u == pytest.approx(hom[0] / hom[2], abs=1e-2)
        assert px.v == pytest.approx(hom[1] / hom[2], abs=1e-2)


def test_kitti_calib_missing_key(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text("\n".join(l for l in KITTI_CALIB.splitlines() if not l.startswith("R0_rect")))
    with pytest.raises(InputError, match="R0_rect"):
        convert_kitti_calib(path)


# ── Detection records ────────────────────────────────────────────────────────

def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def test_decoded_all_false_mask(tmp_path):
    path = write_json(tmp_path / "d.json", {
        "width": 4, "height": 3,
        "detections": [{"box": [0, 0, 4, 3], "class_id": 2, "confidence": 0.8, "rle": [12]}],
    })
    frame = read_detections(path, width=4, height=3)
    assert frame.mode == DetectionMode.DECODED and len(frame) == 1
    assert frame.decoded[0].mask.count == 0


def test_decoded_bad_rle_sum(tmp_path):
    path = write_json(tmp_path / "d.json", {
        "width": 4, "height": 3,
        "detections": [{"box": [0, 0, 4, 3], "class_id": 2, "confidence": 0.8, "rle": [5, 2]}],
    })
    with pytest.raises(InputError, match="RLE runs sum to 7") as exc:
        read_detections(path)
    assert exc.value.location == "detections.0.rle"


def test_decoded_schema_violation(tmp_path):
    path = write_json(tmp_path / "d.json", {
        "width": 4, "height": 3,
        "detections": [{"box": [0, 0, 4, 3], "class_id": 2, "confidence": 1.5, "rle": [12]}],
    })
    with pytest.raises(InputError) as exc:
        read_detections(path)
    assert exc.value.location == "detections.0.confidence"


def test_frame_size_mismatch_and_bad_json(tmp_path):
    path = write_json(tmp_path / "d.json", {"width": 4, "height": 3, "detections": []})
    with pytest.raises(InputError, match="record frame is 4x3"):
        read_detections(path, width=640, height=480)
    broken = tmp_path / "broken.json"
    broken.write_text('{"width": 4,\n "height": }')
    with pytest.raises(InputError, match="invalid JSON") as exc:
        read_detections(broken)
    assert exc.value.location == "line 2"


def test_decoded_detections_read_back(tmp_path, rng):
    data = rng.random((6, 8)) > 0.5
    det = Detection2D(Box2D(1.0, 2.0, 7.5, 6.0), 2, 0.75, BinaryMask(data))
    frame = read_detections(write_decoded_detections([det], 8, 6, tmp_path / "d.json"))
    back = frame.decoded[0]
    assert back.box.as_list() == [1.0, 2.0, 7.5, 6.0]
    assert (back.class_id, back.confidence) == (2, 0.75)
    np.testing.assert_array_equal(back.mask.data, data)


def test_decoded_box_clamped_and_inverted_box_rejected(tmp_path):
    det = {"box": [-5, 1, 20, 9], "class_id": 2, "confidence": 0.8, "rle": [12]}
    frame = read_detections(write_json(tmp_path / "d.json", {"width": 4, "height": 3, "detections": [det]}))
    assert frame.decoded[0].box.as_list() == [0.0, 1.0, 4.0, 3.0]

    det["box"] = [3, 0, 1, 2]
    with pytest.raises(InputError, match="inverted") as exc:
        read_detections(write_json(tmp_path / "bad.json", {"width": 4, "height": 3, "detections": [det]}))
    assert exc.value.location == "detections.0.box"


def raw_record(rng) -> RawDetection:
    conf = np.zeros(NUM_CLASSES)
    conf[2] = 0.8
    return RawDetection(50.0, 40.0, 20.0, 10.0, conf, rng.normal(size=NUM_PROTOTYPES))


def test_raw_detections_with_prototypes(tmp_path, rng):
    protos = PrototypeSet(rng.normal(size=(NUM_PROTOTYPES, PROTO_SIZE, PROTO_SIZE)).astype(np.float32))
    path = write_raw_detections([raw_record(rng)], protos, 640, 480, tmp_path / "d.json")
    blob = tmp_path / "d.protos.bin"
    assert blob.stat().st_size == PROTOS_BYTES == 3276800

    frame = read_detections(path, DetectionMode.RAW, width=640, height=480)
    assert frame.mode == DetectionMode.RAW and len(frame.raw) == 1
    assert frame.raw[0].class_id == 2
    np.testing.assert_array_equal(frame.protos.maps, protos.maps)


def test_raw_prototype_blob_of_wrong_size(tmp_path, rng):
    protos = PrototypeSet(np.zeros((NUM_PROTOTYPES, PROTO_SIZE, PROTO_SIZE)))
    path = write_raw_detections([raw_record(rng)], protos, 640, 480, tmp_path / "d.json")
    (tmp_path / "d.protos.bin").write_bytes(b"\0" * 1000)
    with pytest.raises(InputError, match="3276800"):
        read_detections(path, DetectionMode.RAW)


# ── Manifest and ground truth ────────────────────────────────────────────────

def sequence_files(tmp_path):
    (tmp_path / "calib.txt").write_text(IDENTITY_CALIB)
    write_poses([Pose(0, yaw_transform(0.0)), Pose(1, yaw_transform(0.0))], tmp_path / "poses.txt")
    write_scan([[1.0, 0.0, 0.0]], tmp_path / "scans" / "000000.bin")
    write_scan([[1.0, 0.0, 0.0]], tmp_path / "scans" / "000001.bin")
    write_json(tmp_path / "000000.json", {"width": 640, "height": 480, "detections": []})


def manifest(scans, **extra) -> ManifestRecord:
    return ManifestRecord(calibration="calib.txt", poses="poses.txt", width=640, height=480, scans=scans, **extra)


def test_manifest_resolves_relative_paths(tmp_path):
    sequence_files(tmp_path)
    path = write_manifest(manifest([
        ScanRecord(scan_id=0, scan="scans/000000.bin", detections="000000.json", pose_index=0),
        ScanRecord(scan_id=1, scan="scans/000001.bin", pose_index=1),
    ]), tmp_path / "manifest.json")
    seq = read_manifest(path)
    assert [s.scan_id for s in seq.scans] == [0, 1]
    assert seq.scans[0].scan_path == (tmp_path / "scans" / "000000.bin").resolve()
    assert seq.scans[1].detections_path is None
    assert seq.detection_mode == DetectionMode.DECODED
    assert seq.ground_truth_path is None


def test_manifest_missing_path(tmp_path):
    sequence_files(tmp_path)
    path = write_manifest(manifest([ScanRecord(scan_id=0, scan="scans/missing.bin", pose_index=0)]),
                          tmp_path / "manifest.json")
    with pytest.raises(InputError, match="does not exist"):
        read_manifest(path)


def test_manifest_scan_ids_must_increase(tmp_path):
    sequence_files(tmp_path)
    path = write_json(tmp_path / "manifest.json", {
        "calibration": "calib.txt", "poses": "poses.txt", "width": 640, "height": 480,
        "scans": [
            {"scan_id": 1, "scan": "scans/000001.bin", "pose_index": 1},
            {"scan_id": 1, "scan": "scans/000000.bin", "pose_index": 0},
        ],
    })
    with pytest.raises(InputError, match="strictly increasing"):
        read_manifest(path)


def test_ground_truth_lines(tmp_path):
    boxes = [
        GroundTruthBox(2, Aabb3([0, 0, 0], [1, 2, 3], Frame.WORLD)),
        GroundTruthBox(2, Aabb3([0, 0, 0], [1, 1, 1], Frame.WORLD), scan_id=4),
    ]
    read = read_ground_truth(write_ground_truth(boxes, tmp_path / "gt.jsonl"))
    assert [g.is_global for g in read] == [True, False]
    assert read[1].scan_id == 4
    np.testing.assert_array_equal(read[0].box.max_corner, [1, 2, 3])

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"class_id": 2, "min": [0, 0, 0], "max": [1, 1, 1]}\n'
                   '{"class_id": 2, "min": [2, 0, 0], "max": [1, 1, 1]}\n')
    with pytest.raises(InputError) as exc:
        read_ground_truth(bad)
    assert exc.value.location.startswith("line 2")


# ── Registry export ──────────────────────────────────────────────────────────

def test_empty_registry_is_header_only(tmp_path):
    path = write_registry([], tmp_path / "registry.csv", {"voxel_size": 0.2})
    lines = path.read_text().splitlines()
    assert lines == ['# config: {"voxel_size": 0.2}', ",".join(REGISTRY_FIELDS)]
    records, provenance = read_registry(path)
    assert records == [] and provenance == {"voxel_size": 0.2}


def test_registry_fixed_precision_and_read_back(tmp_path):
    snaps = [snapshot(1, [5, 0, 0], [6, 1, 1]), snapshot(0, [0.1234567891, 0, 0], [1, 1, 1], obs=3)]
    path = write_registry(snaps, tmp_path / "registry.csv")
    rows = path.read_text().splitlines()
    assert rows[2].startswith("0,2,car,")
    assert "0.123457" in rows[2] and "0.1234567" not in rows[2]

    records, _ = read_registry(path)
    assert [r.object_id for r in records] == [0, 1]
    back = snapshot_from_record(records[0])
    assert back.observation_count == 3
    assert back.box.min_corner[0] == pytest.approx(0.123457)


def test_registry_header_must_match(tmp_path):
    path = tmp_path / "registry.csv"
    path.write_text("object_id,class_id\n0,2\n")
    with pytest.raises(InputError, match="header"):
        read_registry(path)


# ── PLY ──────────────────────────────────────────────────────────────────────

def test_ply_header_and_vertices(tmp_path):
    path = write_ply(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), np.array([[1, 2, 3], [4, 5, 6]]), tmp_path / "p.ply")
    text = path.read_text().splitlines()
    assert text[:3] == ["ply", "format ascii 1.0", "element vertex 2"]
    assert text[-1] == "1.000000 2.000000 3.000000 4 5 6"


def test_map_ply_colors_objects_over_white(tmp_path):
    map_pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    cluster = Cluster(map_pts[1:2], Frame.WORLD, 2, 0.9, indices=np.array([1]))
    refined = ObjectInstance(0, 2, 0.9, cluster, Aabb3(map_pts[1], map_pts[1], Frame.WORLD), map_indices=np.array([1]))
    unrefined_cluster = Cluster(np.array([[9.0, 9.0, 9.0]]), Frame.WORLD, 2, 0.9)
    unrefined = ObjectInstance(1, 2, 0.9, unrefined_cluster, Aabb3([9, 9, 9], [9, 9, 9], Frame.WORLD))

    lines = write_map_ply(map_pts, [refined, unrefined], tmp_path / "map.ply").read_text().splitlines()
    assert "element vertex 4" in lines
    body = lines[lines.index("end_header") + 1:]
    r, g, b = object_color(0)
    assert body[0].endswith("255 255 255") and body[2].endswith("255 255 255")
    assert body[1].endswith(f"{r} {g} {b}")
    assert body[3].startswith("9.000000 9.000000 9.000000")
    assert object_color(1) != (255, 255, 255)


def test_box_corners_ply(tmp_path):
    path = write_registry([snapshot(0, [0, 0, 0], [1, 2, 3])], tmp_path / "registry.csv")
    records, _ = read_registry(path)
    lines = write_box_corners_ply(records, tmp_path / "boxes.ply").read_text().splitlines()
    assert "element vertex 8" in lines
    assert "1.000000 2.000000 3.000000" in " ".join(lines)


# ── Class tables ─────────────────────────────────────────────────────────────

def test_class_names_and_map(tmp_path):
    names = tmp_path / "names.txt"
    names.write_text("background\nvehicle\n\n")
    assert read_class_names(names) == ["background", "vehicle"]
    (tmp_path / "none.txt").write_text("\n")
    with pytest.raises(InputError):
        read_class_names(tmp_path / "none.txt")

    cmap = write_json(tmp_path / "map.json", {"2": 1, "7": 1})
    assert read_class_map(cmap) == {2: 1, 7: 1}
    with pytest.raises(InputError):
        read_class_map(write_json(tmp_path / "list.json", [1, 2]))
