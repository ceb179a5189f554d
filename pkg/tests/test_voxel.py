import math

import numpy as np
import pytest

from l2gfuse.kernels import ParamStore, init_params
from l2gfuse.voxel import (
    PointCloud,
    VoxelConfig,
    VoxelHashTable,
    backbone_param_spec,
    compute_centroid,
    lookup_feature,
    surrogate_backbone,
    voxelize,
)
from oracles import group_by_voxel

CFG = VoxelConfig(range_min=(-5, -5, -2), range_max=(5, 5, 2), base_voxel_size=(0.5, 0.5, 0.25), levels=(1, 2, 4))


def _cloud(rng, n=10_000, channels=1, spill=0.0):
    lo, hi = np.array(CFG.range_min) - spill, np.array(CFG.range_max) + spill
    return PointCloud(rng.uniform(lo, hi, size=(n, 3)), rng.uniform(0, 1, size=(n, channels)))


def test_single_point_voxel():
    p = PointCloud([[0.1, 0.2, 0.3]], [[0.7]])
    vm = voxelize(p, CFG, 1)
    assert len(vm) == 1 and vm.counts[0] == 1
    np.testing.assert_array_equal(vm.centroids[0], [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(vm.indices[0], [10, 10, 9])


def test_two_points_one_voxel():
    vm = voxelize(PointCloud([[0.1, 0.1, 0.1], [0.3, 0.3, 0.2]]), CFG, 1)
    assert len(vm) == 1 and vm.counts[0] == 2
    np.testing.assert_allclose(vm.centroids[0], [0.2, 0.2, 0.15], atol=1e-16)


def test_empty_cloud_and_empty_voxel_lookup():
    vm = voxelize(PointCloud(np.zeros((0, 3))), CFG, 1)
    assert len(vm) == 0
    assert lookup_feature(vm, (0.0, 0.0, 0.0)) is None
    with pytest.raises(ValueError, match="empty voxel"):
        compute_centroid(np.zeros((0, 3)))


def test_out_of_range_points_dropped_and_not_found(rng):
    cloud = _cloud(rng, 2000, spill=1.0)
    vm = voxelize(cloud, CFG, 1)
    lo, hi = np.array(CFG.range_min), np.array(CFG.range_max)
    inside = np.all((cloud.xyz >= lo) & (cloud.xyz < hi), axis=1)
    assert vm.counts.sum() == inside.sum()
    assert lookup_feature(vm, (100.0, 0.0, 0.0)) is None
    assert lookup_feature(vm, CFG.range_max) is None  # upper bound is exclusive


@pytest.mark.parametrize("level", [1, 2, 4])
def test_matches_brute_force_group_by(rng, level):
    cloud = _cloud(rng, 10_000, spill=0.5)
    vm = voxelize(cloud, CFG, level)
    groups = group_by_voxel(cloud.xyz, CFG.range_min, CFG.range_max, CFG.base_voxel_size, level)
    assert len(vm) == len(groups)
    for row in range(len(vm)):
        pts = groups[tuple(int(i) for i in vm.indices[row])]
        assert vm.counts[row] == len(pts)
        expect = [math.fsum(p[a] for p in pts) / len(pts) for a in range(3)]
        assert np.max(np.abs(vm.centroids[row] - expect)) <= 1e-12


def test_centroids_lie_in_their_voxel(rng):
    vm = voxelize(_cloud(rng, 5000), CFG, 2)
    lo = np.array(CFG.range_min) + vm.indices * vm.voxel_size
    assert np.all(vm.centroids >= lo) and np.all(vm.centroids < lo + vm.voxel_size)


def test_hash_round_trip_every_entry(rng):
    for level in CFG.levels:
        vm = voxelize(_cloud(rng, 10_000), CFG, level)
        np.testing.assert_array_equal(vm.rows_for_points(vm.centroids), np.arange(len(vm)))
        for row in rng.choice(len(vm), 50, replace=False):
            entry = lookup_feature(vm, vm.centroids[row])
            assert entry.count == vm.counts[row]


def test_hash_table_random_keys(rng):
    keys = np.unique(rng.integers(0, 2 ** 40, size=20_000).astype(np.uint64))
    table = VoxelHashTable(keys)
    np.testing.assert_array_equal(table.find(keys), np.arange(len(keys)))
    absent = np.setdiff1d(rng.integers(0, 2 ** 40, size=5000).astype(np.uint64), keys)
    assert np.all(table.find(absent) == -1)
    # consecutive keys, the common case for neighbouring voxels
    dense = np.arange(4096, dtype=np.uint64)
    np.testing.assert_array_equal(VoxelHashTable(dense).find(dense), np.arange(4096))


def test_permutation_invariance_is_bitwise(rng):
    cloud = _cloud(rng, 10_000, channels=2)
    perm = rng.permutation(len(cloud))
    for level in CFG.levels:
        a, b = voxelize(cloud, CFG, level), voxelize(cloud.take(perm), CFG, level)
        for field in ("keys", "indices", "counts", "centroids", "extras_mean"):
            assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_level_must_be_configured():
    with pytest.raises(ValueError):
        voxelize(PointCloud(np.zeros((1, 3))), CFG, 3)
    with pytest.raises(ValueError):
        VoxelConfig(levels=(1, 3, 4))


# -- surrogate featurizer --------------------------------------------------------


def _params(seed=0, channels=8):
    return init_params(backbone_param_spec(CFG, 1, channels), seed)


def test_backbone_deterministic_and_permutation_invariant(rng):
    cloud = _cloud(rng, 3000)
    params = _params()
    a = surrogate_backbone(cloud, CFG, params)
    b = surrogate_backbone(cloud, CFG, params)
    c = surrogate_backbone(cloud.take(rng.permutation(len(cloud))), CFG, params)
    for x, y, z in zip(a, b, c):
        assert x.features.tobytes() == y.features.tobytes() == z.features.tobytes()


def test_backbone_single_voxel_manual():
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.2, 0.15]])
    cloud = PointCloud(pts, [[0.2], [0.6]])
    params = _params(channels=4)
    maps = surrogate_backbone(cloud, CFG, params)
    centre = np.array([0.25, 0.25, 0.125])
    size = np.array(CFG.base_voxel_size)
    stats0 = np.concatenate([(pts.mean(axis=0) - centre) / size, [math.log(2)], [0.4]])
    f0 = np.maximum(params["backbone.l0.w"] @ stats0 + params["backbone.l0.b"], 0)
    np.testing.assert_allclose(maps[0].features[0], f0, atol=1e-12)
    centre1 = np.array([0.5, 0.5, 0.25])  # level 2 voxel spans [0, 1) x [0, 1) x [0, 0.5)
    stats1 = np.concatenate([(pts.mean(axis=0) - centre1) / (2 * size), [math.log(2)], [0.4], f0])
    f1 = np.maximum(params["backbone.l1.w"] @ stats1 + params["backbone.l1.b"], 0)
    np.testing.assert_allclose(maps[1].features[0], f1, atol=1e-12)


def test_backbone_missing_params():
    with pytest.raises(KeyError, match="uninitialized parameters"):
        surrogate_backbone(PointCloud(np.zeros((1, 3))), CFG, ParamStore())
