import math
from dataclasses import replace

import numpy as np
import pytest

from l2gfuse.attention import DeformAttnParams, deform_attn
from l2gfuse.config import GeneratorSettings, RunConfig
from l2gfuse.fusion import (
    FusionConfig,
    NeighborIndex,
    ProposalFeatures,
    assign_cameras,
    cell_statistics,
    decode_box,
    detection_loss,
    encode_box,
    fda_aggregate,
    global_fuse,
    local_fuse,
    model_param_spec,
    pie_encode,
    refine,
    roi_grid_pool,
)
from l2gfuse.geometry import Box7, CameraModel, project_point, split_box_grid
from l2gfuse.kernels import FeatureMap, ParamStore, concat_reduce, init_params
from l2gfuse.pipeline import run_scene
from l2gfuse.synth import generate_scene
from l2gfuse.voxel import PointCloud, VoxelConfig, surrogate_backbone, voxelize
from oracles import brute_cell_stats

VCFG = VoxelConfig(range_min=(-12, -12, -2), range_max=(12, 12, 4), base_voxel_size=(0.2, 0.2, 0.2), levels=(1, 2, 4, 8))
FCFG = FusionConfig(u=3, heads=2, points=2, voxel_channels=6, image_channels=5, grid_channels=8, refine_hidden=16)


def _random_params(seed=0):
    """Initialized parameters with the zero-initialized offset heads randomized too."""
    params = init_params(model_param_spec(VCFG, FCFG), seed)
    rng = np.random.default_rng(seed + 100)
    return params.replaced({n: rng.normal(size=a.shape) * 0.3 for n, a in params.items() if n.endswith(".offset")})


@pytest.fixture(scope="module")
def scene():
    return generate_scene(5, n_objects=3, n_cameras=2, points_per_object=300, clutter_ratio=0.3, cfg=VCFG,
                          image_channels=5, extent=8)


@pytest.fixture(scope="module")
def params():
    return _random_params()


@pytest.fixture(scope="module")
def maps(scene, params):
    return surrogate_backbone(scene.points, VCFG, params)


def _flip(cam):
    D = np.diag([-1.0, 1.0, -1.0, 1.0])
    return CameraModel(cam.intrinsic, D @ cam.extrinsic, cam.image_width, cam.image_height)


# -- camera assignment -------------------------------------------------------------


def test_assign_cameras_prefers_central_then_first():
    K = np.array([[100.0, 0, 50], [0, 100, 40], [0, 0, 1]])
    cam = CameraModel(K, np.eye(4), 100, 80)
    shifted = np.eye(4)
    shifted[0, 3] = 0.2
    pts = np.array([[0.0, 0, 10], [0.0, 0, -10]])
    idx, uv = assign_cameras(pts, [CameraModel(K, shifted, 100, 80), cam, cam])
    assert list(idx) == [1, -1]
    np.testing.assert_array_equal(uv[0], [50.0, 40.0])


# -- global fusion -------------------------------------------------------------------


def test_global_fuse_behind_every_camera_reduces_with_zeros(scene, maps, params):
    cams = [_flip(c) for c in scene.cameras]
    fused = global_fuse(maps, scene.feature_maps, cams, params, FCFG)
    for li, fm in fused.items():
        f = maps[li].features
        np.testing.assert_array_equal(fm.features, concat_reduce(f, np.zeros_like(f), params, f"gof.l{li}.reduce"))


def test_global_fuse_zero_image_features(scene, maps, params):
    zeros = [FeatureMap(np.zeros_like(f.data), f.stride) for f in scene.feature_maps]
    fused = global_fuse(maps, zeros, scene.cameras, params, FCFG)
    for li, fm in fused.items():
        f = maps[li].features
        np.testing.assert_allclose(fm.features, concat_reduce(f, np.zeros_like(f), params, f"gof.l{li}.reduce"),
                                   atol=1e-14)


def test_global_fuse_matches_step_by_step(scene, maps, params):
    fused = global_fuse(maps, scene.feature_maps, scene.cameras, params, FCFG)
    seen = 0
    for li, fmap in fused.items():
        attn = DeformAttnParams.from_store(params, f"gof.l{li}.attn")
        for row in range(len(maps[li])):
            f, c = maps[li].features[row], maps[li].centroids[row]
            best = None
            for cam, image in zip(scene.cameras, scene.feature_maps):
                hit = project_point(cam, c)
                if hit is not None and (best is None or abs(hit[0] - cam.principal_x) < best[0]):
                    best = (abs(hit[0] - cam.principal_x), hit, image)
            attended = np.zeros_like(f) if best is None else deform_attn(f, best[2], best[1][:2], attn)
            seen += best is not None
            expect = concat_reduce(f, attended, params, f"gof.l{li}.reduce")
            np.testing.assert_allclose(fmap.features[row], expect, atol=1e-12)
    assert seen > 0


def test_global_fuse_rejects_camera_map_mismatch(scene, maps, params):
    with pytest.raises(ValueError):
        global_fuse(maps, scene.feature_maps[:1], scene.cameras, params, FCFG)


def test_duplicate_camera_changes_nothing(scene, maps, params):
    a = global_fuse(maps, scene.feature_maps, scene.cameras, params, FCFG)
    b = global_fuse(maps, scene.feature_maps + scene.feature_maps[:1], scene.cameras + scene.cameras[:1], params, FCFG)
    for li in a:
        assert a[li].features.tobytes() == b[li].features.tobytes()


# -- ROI grid pooling ---------------------------------------------------------------


def _pool_params(rng, width):
    return ParamStore({"pool.w": rng.normal(size=(8, width)), "pool.b": rng.normal(size=8)})


def test_pool_lone_voxel_is_projected_copy(rng):
    vm = voxelize(PointCloud([[1.0, 1.0, 0.5]]), VCFG, 8)
    f = rng.normal(size=(1, 6))
    params = _pool_params(rng, 12)
    fused = {2: vm.with_features(np.zeros((1, 6))), 3: vm.with_features(f)}
    grid = split_box_grid(Box7((1.2, 1.1, 0.4), (1, 1, 1)), 1)
    out, found = roi_grid_pool(fused, grid, params, replace(FCFG, pool_neighbors=1))
    assert found.all()
    np.testing.assert_allclose(out[0], params["pool.w"] @ np.concatenate([np.zeros(6), f[0]]) + params["pool.b"],
                               atol=1e-12)


def test_pool_nothing_in_radius_gives_zero(rng):
    vm = voxelize(PointCloud([[-10.0, -10.0, 0.0]]), VCFG, 8)
    params = _pool_params(rng, 6)
    grid = split_box_grid(Box7((5, 5, 0), (2, 2, 2)), 2)
    out, found = roi_grid_pool({3: vm.with_features(rng.normal(size=(1, 6)))}, grid, params, FCFG)
    assert not found.any()
    np.testing.assert_array_equal(out, np.zeros((8, 8)))


def test_pool_matches_brute_force(scene, maps, params):
    fused = global_fuse(maps, scene.feature_maps, scene.cameras, params, FCFG)
    index = NeighborIndex(fused)
    for box in scene.gt_boxes:
        grid = split_box_grid(box, FCFG.u)
        out, found = roi_grid_pool(index, grid, params, FCFG)
        for g, centre in enumerate(grid.centers):
            parts, any_hit = [], False
            for li in sorted(fused):
                vm = fused[li]
                radius = FCFG.pool_radius_factor * math.sqrt(sum((s * vm.level) ** 2 for s in VCFG.base_voxel_size))
                d = np.sqrt(((vm.centroids - centre) ** 2).sum(axis=1))
                near = sorted((dist, r) for r, dist in enumerate(d) if dist <= radius)[:FCFG.pool_neighbors]
                acc, wsum = np.zeros(vm.features.shape[1]), 0.0
                for dist, r in near:
                    w = 1.0 / (dist + 1e-6)
                    acc += w * vm.features[r]
                    wsum += w
                parts.append(acc / wsum if near else acc)
                any_hit |= bool(near)
            expect = params["pool.w"] @ np.concatenate(parts) + params["pool.b"] if any_hit else np.zeros(8)
            assert found[g] == any_hit
            np.testing.assert_allclose(out[g], expect, atol=1e-10)


# -- position information encoder ----------------------------------------------------


def test_pie_cell_statistics_match_membership_scan(rng):
    for _ in range(15):
        box = Box7(rng.uniform(-3, 3, 3), rng.uniform(1, 5, 3), rng.uniform(-math.pi, math.pi))
        xyz = np.asarray(box.center) + rng.uniform(-3, 3, size=(800, 3))
        u = int(rng.integers(1, 6))
        grid = split_box_grid(box, u)
        stats = cell_statistics(box, grid, PointCloud(xyz), tau=1.0)
        counts, sums = brute_cell_stats(box, u, xyz)
        np.testing.assert_array_equal(stats.counts, counts)
        filled = counts > 0
        np.testing.assert_allclose(stats.centroid_offsets[filled],
                                   sums[filled] / counts[filled, None] - grid.local_offsets[filled], atol=1e-12)
        np.testing.assert_array_equal(stats.centroid_offsets[~filled], 0.0)
        np.testing.assert_array_equal(stats.log_counts, np.log(counts + 1.0))


def test_pie_empty_cell_and_centre_cell():
    box = Box7((0, 0, 0), (3, 3, 3), 0.4)
    grid = split_box_grid(box, 3)
    stats = cell_statistics(box, grid, PointCloud(np.zeros((0, 3))), tau=1.0)
    assert np.all(stats.log_counts == 0.0) and np.all(stats.centroid_offsets == 0.0)
    centre = grid.cell_index(1, 1, 1)
    np.testing.assert_array_equal(grid.local_offsets[centre], [0.0, 0.0, 0.0])


def test_pie_encode_input_layout(params, rng):
    box = Box7((1, 2, 0.5), (4, 2, 1.5), 0.3)
    grid = split_box_grid(box, 3)
    pts = PointCloud(np.asarray(box.center) + rng.uniform(-1, 1, size=(200, 3)) * [2, 1, 0.75])
    for mode, n_in in (("XYZ_D", 7), ("XYZ_D_R", 10)):
        cfg = replace(FCFG, pie_mode=mode)
        feat, stats = pie_encode(box, grid, pts, params, cfg)
        pre = f"pie.{mode.lower()}"
        assert params[f"{pre}.w1"].shape[1] == n_in
        cols = [grid.local_offsets[0], box.center, [stats.log_counts[0]]]
        if mode == "XYZ_D_R":
            cols.append(stats.centroid_offsets[0])
        x = np.concatenate(cols)
        h = np.maximum(params[f"{pre}.w1"] @ x + params[f"{pre}.b1"], 0)
        np.testing.assert_allclose(feat[0], params[f"{pre}.w2"] @ h + params[f"{pre}.b2"], atol=1e-12)


# -- local fusion ----------------------------------------------------------------------


def test_local_fuse_zero_image_and_out_of_view(scene, params, rng):
    grid = split_box_grid(scene.gt_boxes[0], FCFG.u)
    q = rng.normal(size=(27, 8))
    expect = concat_reduce(q, np.zeros_like(q), params, "lof.reduce")
    zeros = [FeatureMap(np.zeros_like(f.data), f.stride) for f in scene.feature_maps]
    np.testing.assert_allclose(local_fuse(grid, q, zeros, scene.cameras, params, FCFG), expect, atol=1e-14)
    flipped = [_flip(c) for c in scene.cameras]
    np.testing.assert_array_equal(local_fuse(grid, q, scene.feature_maps, flipped, params, FCFG), expect)
    noisy = [FeatureMap(rng.normal(size=f.data.shape), f.stride) for f in scene.feature_maps]
    np.testing.assert_array_equal(local_fuse(grid, q, noisy, flipped, params, FCFG), expect)


def test_local_fuse_single_cell_chain(scene, params, rng):
    box = scene.gt_boxes[0]
    grid = split_box_grid(box, 1)
    q = rng.normal(size=(1, 8))
    attn = DeformAttnParams.from_store(params, "lof.attn")
    best = None
    for cam, image in zip(scene.cameras, scene.feature_maps):
        hit = project_point(cam, grid.centers[0])
        if hit is not None and (best is None or abs(hit[0] - cam.principal_x) < best[0]):
            best = (abs(hit[0] - cam.principal_x), hit, image)
    assert best is not None
    expect = concat_reduce(q[0], deform_attn(q[0], best[2], best[1][:2], attn), params, "lof.reduce")
    np.testing.assert_allclose(local_fuse(grid, q, scene.feature_maps, scene.cameras, params, FCFG)[0], expect,
                               atol=1e-12)


# -- aggregation --------------------------------------------------------------------------


@pytest.mark.parametrize("gof", [False, True])
@pytest.mark.parametrize("lof", [False, True])
@pytest.mark.parametrize("fda", [False, True])
def test_fused_sum_is_exactly_enabled_terms(scene, params, maps, gof, lof, fda):
    cfg = RunConfig(voxel=VCFG, fusion=FCFG.with_toggles(gof, lof, fda), generator=GeneratorSettings(precision=64))
    result = run_scene(scene, cfg, params, maps=maps, keep_features=True)
    index = NeighborIndex(global_fuse(maps, scene.feature_maps, scene.cameras, params, cfg.fusion)) if gof else None
    for (box, _), pf in zip(result.proposals, result.features):
        grid = split_box_grid(box, FCFG.u)
        p, stats = pie_encode(box, grid, scene.points, params, cfg.fusion)
        expect = p.copy()
        if lof:
            expect = expect + local_fuse(grid, p, scene.feature_maps, scene.cameras, params, cfg.fusion)
        if gof:
            expect = expect + roi_grid_pool(index, grid, params, cfg.fusion)[0]
        assert pf.fused.tobytes() == expect.tobytes()
        if not fda:
            assert pf.refined.tobytes() == expect.ravel().tobytes()


def test_fda_masked_tokens_untouched(params, rng):
    pie = rng.normal(size=(27, 8))
    mask = np.zeros(27, bool)
    mask[4] = True
    pf = ProposalFeatures.build(pie, valid_mask=mask)
    flat = fda_aggregate(pf, params, FCFG).reshape(27, 8)
    np.testing.assert_array_equal(flat[~mask], pie[~mask])
    assert not np.allclose(flat[4], pie[4])
    empty = ProposalFeatures.build(pie, valid_mask=np.zeros(27, bool))
    np.testing.assert_array_equal(fda_aggregate(empty, params, FCFG), pie.ravel())


# -- refinement head and loss ------------------------------------------------------------


def test_untrained_head_returns_proposal_exactly(rng):
    params = init_params(model_param_spec(VCFG, FCFG), 3)
    for _ in range(5):
        prop = Box7(rng.normal(size=3) * 5, rng.uniform(0.5, 5, 3), rng.uniform(-math.pi, math.pi))
        conf, box = refine(rng.normal(size=27 * 8), prop, params)
        assert box == prop
        assert 0.0 < conf < 1.0


def test_zero_logit_gives_half(rng):
    params = init_params(model_param_spec(VCFG, FCFG), 3)
    params = params.replaced({"refine.cls.w2": np.zeros((1, 16)), "refine.cls.b2": np.zeros(1)})
    conf, _ = refine(rng.normal(size=27 * 8), Box7((0, 0, 0), (1, 1, 1)), params)
    assert conf == 0.5


def test_decode_matches_manual_formula(rng):
    prop = Box7((1.0, -2.0, 0.5), (4.0, 2.0, 1.5), 2.9)
    r = rng.normal(size=7) * 0.2
    diag = math.hypot(4.0, 2.0)
    out = decode_box(prop, r)
    np.testing.assert_allclose(out.center, [1.0 + r[0] * diag, -2.0 + r[1] * diag, 0.5 + r[2] * diag], atol=1e-14)
    np.testing.assert_allclose(out.size, [4.0 * math.exp(r[3]), 2.0 * math.exp(r[4]), 1.5 * math.exp(r[5])],
                               rtol=1e-14)
    wrapped = (2.9 + r[6] + math.pi) % (2 * math.pi) - math.pi
    assert abs(math.remainder(out.heading - wrapped, 2 * math.pi)) < 1e-12
    np.testing.assert_allclose(encode_box(out, prop), [*r[:6], math.remainder(r[6], 2 * math.pi)], atol=1e-12)


def test_refine_rejects_non_finite():
    params = init_params(model_param_spec(VCFG, FCFG), 3)
    with pytest.raises(ValueError):
        refine(np.full(27 * 8, np.nan), Box7((0, 0, 0), (1, 1, 1)), params)


def test_loss_perfect_and_half():
    box = Box7((0, 0, 0), (2, 1, 1), 0.2)
    perfect = detection_loss(1.0, box, box, 1.0, FCFG)
    assert perfect.total < 1e-11 and perfect.reg == 0.0
    assert perfect.rpn == 0.0 and perfect.rpn_computed is False
    half = detection_loss(0.5, box, box, 0.5, FCFG)
    assert abs(half.total - math.log(2)) < 1e-15


def test_loss_matches_term_by_term(rng):
    cfg = replace(FCFG, alpha=0.7)
    for _ in range(20):
        target = Box7(rng.normal(size=3), rng.uniform(1, 3, 3), rng.uniform(-3, 3))
        anchor = Box7(np.asarray(target.center) + rng.normal(size=3) * 0.1, target.size, target.heading + 0.1)
        refined = decode_box(anchor, rng.normal(size=7) * 0.05)
        iou, p = rng.uniform(0, 1), rng.uniform(0.01, 0.99)
        t = min(max((iou - 0.25) / 0.5, 0.0), 1.0)
        conf = -(t * math.log(p) + (1 - t) * math.log(1 - p))
        reg = 0.0
        if iou > 0.55:
            diag = anchor.bev_diagonal
            d = [(refined.center[k] - target.center[k]) / diag for k in range(3)]
            d += [math.log(refined.size[k] / target.size[k]) for k in range(3)]
            d.append(math.remainder(refined.heading - target.heading, 2 * math.pi))
            beta = 1 / 9
            reg = sum(0.5 * x * x / beta if abs(x) < beta else abs(x) - 0.5 * beta for x in d)
        got = detection_loss(p, refined, target, iou, cfg, anchor=anchor)
        assert abs(got.conf - conf) < 1e-12 and abs(got.reg - reg) < 1e-12
        assert abs(got.total - (conf + 0.7 * reg)) < 1e-12


def test_loss_rejects_non_finite():
    box = Box7((0, 0, 0), (1, 1, 1))
    with pytest.raises(ValueError):
        detection_loss(float("nan"), box, box, 0.5, FCFG)


def test_threaded_run_matches_serial(scene, params, maps):
    cfg = RunConfig(voxel=VCFG, fusion=FCFG)
    serial = run_scene(scene, cfg, params, maps=maps, threads=1).detections
    threaded = run_scene(scene, cfg, params, maps=maps, threads=4).detections
    assert serial == threaded
