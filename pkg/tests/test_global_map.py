import numpy as np
import pytest

from conftest import world_cluster
from src.geometry.frames import fit_aabb
from src.layers.global_map import (
    GlobalMap, absorb, decode_keys, encode_keys, integrate_scan, localize, refine_cluster,
    refine_indices, refine_registry, voxel_keys,
)
from src.layers.merge import ObjectRegistry
from src.types import Cluster, Frame, PointCloud, ScanDetections


def world_cloud(points) -> PointCloud:
    return PointCloud(np.asarray(points, dtype=float), Frame.WORLD)


def brute_force_refine(map_points: np.ndarray, cluster_points: np.ndarray, r: float) -> np.ndarray:
    diff = np.abs(map_points[:, None, :] - cluster_points[None, :, :]).max(axis=2)
    return np.flatnonzero((diff <= r / 2).any(axis=1))


# ── Integration ──────────────────────────────────────────────────────────────

def test_integrate_appends_and_indexes():
    gm = GlobalMap(r=0.2, leaf_size=0)
    added = gm.integrate_scan(world_cloud([[0.05, 0.05, 0.05], [1.0, 1.0, 1.0]]))
    assert added.tolist() == [0, 1]
    assert len(gm) == 2
    assert gm.voxel_index[(0, 0, 0)] == [0]
    assert gm.voxel_index[(5, 5, 5)] == [1]

    again = gm.integrate_scan(world_cloud([[0.1, 0.1, 0.1]]))
    assert again.tolist() == [2]
    assert [s.tolist() for s in gm.scan_sources] == [[0, 1], [2]]


def test_integrate_empty_scan_and_frame_check():
    gm = integrate_scan(GlobalMap(leaf_size=0), PointCloud.empty(Frame.WORLD))
    assert len(gm) == 0 and gm.points.shape == (0, 3)
    assert gm.scan_sources[0].size == 0
    with pytest.raises(ValueError):
        gm.integrate_scan(PointCloud(np.zeros((1, 3)), Frame.LIDAR))


def test_voxel_bucket_invariant(rng):
    gm = GlobalMap(r=0.3, leaf_size=0)
    for _ in range(5):
        gm.integrate_scan(world_cloud(rng.uniform(-3, 3, size=(400, 3))))
    seen = []
    for key, members in gm.voxel_index.items():
        for i in members:
            assert tuple(voxel_keys(gm.points[i], 0.3)[0]) == key
        seen.extend(members)
    assert sorted(seen) == list(range(len(gm)))


def test_leaf_filter_keeps_one_point_per_leaf():
    gm = GlobalMap(r=0.2, leaf_size=0.1)
    gm.integrate_scan(world_cloud([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.5, 0.5, 0.5]]))
    gm.integrate_scan(world_cloud([[0.03, 0.03, 0.03], [0.9, 0.9, 0.9]]))
    np.testing.assert_array_equal(gm.points, [[0.01, 0.01, 0.01], [0.5, 0.5, 0.5], [0.9, 0.9, 0.9]])
    assert gm.scan_sources[1].tolist() == [2]


def test_rejects_non_positive_voxel():
    with pytest.raises(ValueError):
        GlobalMap(r=0.0)


# ── Refinement ───────────────────────────────────────────────────────────────

def test_refine_zero_offset_and_cube_boundary():
    gm = GlobalMap(r=0.5, leaf_size=0)
    gm.integrate_scan(world_cloud([[1.0, 1.0, 1.0], [1.25, 1.0, 1.0], [1.5, 1.0, 1.0], [1.25, 0.75, 1.25]]))
    out = refine_indices(gm, np.array([[1.0, 1.0, 1.0]]))
    # (r, 0, 0) lies outside the r-cube; the r/2 face and corner are inside
    assert out.tolist() == [0, 1, 3]


def test_refine_on_empty_inputs():
    gm = GlobalMap(leaf_size=0)
    assert refine_indices(gm, np.array([[0.0, 0.0, 0.0]])).size == 0
    gm.integrate_scan(world_cloud([[0.0, 0.0, 0.0]]))
    assert refine_indices(gm, np.zeros((0, 3))).size == 0


def test_refine_matches_brute_force(rng):
    for _ in range(30):
        r = float(rng.uniform(0.1, 0.6))
        gm = GlobalMap(r=r, leaf_size=0)
        gm.integrate_scan(world_cloud(rng.uniform(-2, 2, size=(int(rng.integers(1, 800)), 3))))
        cluster = rng.uniform(-2, 2, size=(int(rng.integers(1, 40)), 3))
        np.testing.assert_array_equal(refine_indices(gm, cluster), brute_force_refine(gm.points, cluster, r))


def test_refine_matches_brute_force_on_dense_map(rng):
    gm = GlobalMap(r=0.2, leaf_size=0)
    gm.integrate_scan(world_cloud(rng.uniform(0, 10, size=(100_000, 3))))
    cluster = rng.uniform(4, 6, size=(25, 3))
    np.testing.assert_array_equal(refine_indices(gm, cluster), brute_force_refine(gm.points, cluster, 0.2))


def test_refine_is_monotone_in_cluster(rng):
    gm = GlobalMap(r=0.3, leaf_size=0)
    gm.integrate_scan(world_cloud(rng.uniform(0, 4, size=(3000, 3))))
    big = rng.uniform(1, 3, size=(30, 3))
    small = big[:10]
    assert set(refine_indices(gm, small)) <= set(refine_indices(gm, big))


def test_second_pass_contains_first(rng):
    gm = GlobalMap(r=0.3, leaf_size=0)
    gm.integrate_scan(world_cloud(rng.uniform(0, 4, size=(3000, 3))))
    seed = Cluster(gm.points[:5], Frame.WORLD, 2, 0.9)
    first = refine_cluster(gm, seed)
    second = refine_cluster(gm, first)
    assert set(refine_indices(gm, seed.points)) <= set(refine_indices(gm, first.points))
    np.testing.assert_array_equal(second.points[:len(first)], first.points)


def test_refined_cluster_keeps_its_own_points(rng):
    gm = GlobalMap(r=0.2, leaf_size=0)
    gm.integrate_scan(world_cloud(rng.uniform(0, 2, size=(2000, 3))))
    own = rng.uniform(0.5, 1.5, size=(40, 3))
    cluster = Cluster(own, Frame.WORLD, 2, 0.9)
    grown = refine_cluster(gm, cluster)

    absorbed = refine_indices(gm, own)
    assert absorbed.size > 0
    assert len(grown) == len(own) + absorbed.size
    np.testing.assert_array_equal(grown.points[:len(own)], own)
    held = {tuple(p) for p in grown.points.tolist()}
    assert held == {tuple(p) for p in own.tolist()} | {tuple(p) for p in gm.points[absorbed].tolist()}


def test_map_points_already_in_the_cluster_are_not_duplicated():
    pts = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.15, 0.0, 0.0]])
    gm = GlobalMap(r=0.2, leaf_size=0)
    gm.integrate_scan(world_cloud(pts))
    gm.integrate_scan(world_cloud(pts[:1]))
    indices, fresh = absorb(gm, [pts[:2]])[0]
    assert indices.tolist() == [0, 1, 2, 3]
    assert fresh.tolist() == [False, False, True, False]
    grown = refine_cluster(gm, Cluster(pts[:2], Frame.WORLD, 2, 0.9))
    np.testing.assert_array_equal(grown.points, pts)


def test_batched_absorb_matches_one_set_at_a_time(rng):
    gm = GlobalMap(r=0.25, leaf_size=0)
    gm.integrate_scan(world_cloud(rng.uniform(0, 3, size=(4000, 3))))
    sets = [rng.uniform(0, 3, size=(int(rng.integers(0, 30)), 3)) for _ in range(12)]
    for to_fixpoint in (False, True):
        batched = absorb(gm, sets, to_fixpoint)
        for pts, (indices, fresh) in zip(sets, batched):
            alone, alone_fresh = absorb(gm, [pts], to_fixpoint)[0]
            np.testing.assert_array_equal(indices, alone)
            np.testing.assert_array_equal(fresh, alone_fresh)


def test_voxel_codes_sort_like_keys(rng):
    keys = rng.integers(-1000, 1000, size=(500, 3))
    codes = encode_keys(keys)
    np.testing.assert_array_equal(decode_keys(codes), keys)
    np.testing.assert_array_equal(np.argsort(codes, kind="stable"), np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0])))
    with pytest.raises(ValueError):
        encode_keys(np.array([[1 << 21, 0, 0]]))


def test_fixpoint_absorbs_a_chain():
    gm = GlobalMap(r=0.2, leaf_size=0)
    chain = np.column_stack([np.arange(0.0, 2.0, 0.09), np.zeros(23), np.zeros(23)])
    gm.integrate_scan(world_cloud(chain))
    seed = Cluster(chain[:1], Frame.WORLD, 2, 0.9)

    assert refine_indices(gm, seed.points).tolist() == [0, 1]
    assert len(refine_cluster(gm, seed)) == 2
    assert refine_indices(gm, seed.points, to_fixpoint=True).tolist() == list(range(23))
    full = refine_cluster(gm, seed, to_fixpoint=True)
    np.testing.assert_array_equal(full.points, chain)
    assert refine_cluster(gm, full, to_fixpoint=True) is full


def test_empty_refinement_keeps_cluster():
    gm = GlobalMap(r=0.2, leaf_size=0)
    gm.integrate_scan(world_cloud([[10.0, 10.0, 10.0]]))
    cluster = world_cluster([0, 0, 0], [1, 1, 1])
    assert refine_cluster(gm, cluster) is cluster
    with pytest.raises(ValueError):
        refine_cluster(gm, Cluster(np.zeros((1, 3)), Frame.LIDAR, 2, 0.9))


def test_localize_is_the_centroid():
    np.testing.assert_allclose(localize(world_cluster([0, 0, 0], [2, 4, 6])), [1, 2, 3])


# ── Registry refinement ──────────────────────────────────────────────────────

def single_object_registry(points, scan_id=0) -> ObjectRegistry:
    reg = ObjectRegistry()
    cluster = Cluster(points, Frame.WORLD, 2, 0.9)
    reg.pair_and_merge(ScanDetections(scan_id, [cluster], [fit_aabb(cluster.points, Frame.WORLD)], Frame.WORLD))
    return reg


def test_refine_registry_on_empty_registry():
    gm = GlobalMap(leaf_size=0)
    gm.integrate_scan(world_cloud([[0.0, 0.0, 0.0]]))
    assert len(refine_registry(gm, ObjectRegistry(), scan_id=0)) == 0


def test_refine_registry_fixed_point_when_map_holds_only_cluster():
    pts = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]])
    gm = GlobalMap(r=0.2, leaf_size=0)
    gm.integrate_scan(world_cloud(pts))
    reg = single_object_registry(pts)
    refine_registry(gm, reg, scan_id=0)
    np.testing.assert_array_equal(reg.get(0).cluster.points, pts)
    assert reg.get(0).map_indices.tolist() == [0, 1, 2]


def test_refine_registry_fills_a_detection_gap():
    # points from a scan without detections still join the object
    gm = GlobalMap(r=0.2, leaf_size=0)
    seen = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    gm.integrate_scan(world_cloud(seen))
    gm.integrate_scan(world_cloud([[0.18, 0.0, 0.0], [5.0, 5.0, 5.0]]))
    reg = single_object_registry(seen)
    refine_registry(gm, reg, scan_id=0)
    inst = reg.get(0)
    assert len(inst.cluster) == 3
    np.testing.assert_allclose(inst.box.max_corner, [0.18, 0, 0])
    np.testing.assert_allclose(inst.centroid, [0.28 / 3, 0, 0])


def test_refine_registry_refresh_period():
    gm = GlobalMap(r=0.2, leaf_size=0)
    seen = np.array([[0.0, 0.0, 0.0]])
    gm.integrate_scan(world_cloud(np.vstack([seen, [[0.1, 0.0, 0.0]]])))
    reg = single_object_registry(seen, scan_id=0)

    # scan 3 does not touch the instance; only a refresh scan refines it
    refine_registry(gm, reg, scan_id=3, scan_index=3, refresh_period=2)
    assert len(reg.get(0).cluster) == 1
    refine_registry(gm, reg, scan_id=4, scan_index=4, refresh_period=2)
    assert len(reg.get(0).cluster) == 2
