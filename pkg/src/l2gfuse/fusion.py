"""Local-to-global LiDAR/camera fusion for two-stage box refinement.

Stages, in pipeline order:

* :func:`global_fuse` enriches voxel features with image features sampled
  around the projected voxel point centroids, and :func:`roi_grid_pool`
  gathers those fused voxels onto each proposal's grid.
* :func:`pie_encode` encodes per-cell position statistics of the raw points
  inside a proposal, and :func:`local_fuse` attends from those grid features
  to the image around each projected grid centre.
* :func:`fda_aggregate` sums the three grid streams and lets non-empty grid
  points attend to each other before flattening.
* :func:`refine` and :func:`detection_loss` form the second-stage head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .attention import DeformAttnParams, deform_attn_batch, deform_attn_param_spec, encoder_param_spec, self_attn_layer
from .geometry import Box7, CameraModel, RoiGrid, normalize_heading, project_points, world_to_canonical
from .kernels import FeatureMap, ParamStore, concat_reduce, ffn, ffn_param_spec, get_dtype, layer_norm, linear, relu
from .voxel import PointCloud, SparseVoxelMap, VoxelConfig, backbone_param_spec

__all__ = [
    "FusionConfig",
    "LossBreakdown",
    "NeighborIndex",
    "PIE_MODES",
    "ProposalFeatures",
    "assign_cameras",
    "decode_box",
    "detection_loss",
    "encode_box",
    "fda_aggregate",
    "global_fuse",
    "local_fuse",
    "model_param_spec",
    "pie_encode",
    "refine",
    "roi_grid_pool",
]

PIE_MODES = ("XYZ_D", "XYZ_D_R")
_IDW_EPS = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    u: int = 6
    heads: int = 4
    points: int = 4
    tau: float = 1.0
    alpha: float = 1.0
    levels_for_gof: tuple[int, ...] = (-2, -1)
    enable_gof: bool = True
    enable_lof: bool = True
    enable_fda: bool = True
    pie_mode: str = "XYZ_D_R"
    pool_neighbors: int = 8
    pool_radius_factor: float = 2.0
    point_channels: int = 1
    voxel_channels: int = 16
    image_channels: int = 16
    grid_channels: int = 32
    refine_hidden: int = 64
    conf_iou_low: float = 0.25
    conf_iou_high: float = 0.75
    reg_iou_gate: float = 0.55
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self) -> None:
        if self.u < 1:
            raise ValueError("u must be >= 1")
        if self.heads < 1 or self.points < 1:
            raise ValueError("heads and points must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.pool_neighbors < 1:
            raise ValueError("pool_neighbors must be >= 1")
        if self.pie_mode not in PIE_MODES:
            raise ValueError(f"pie_mode must be one of {PIE_MODES}")
        if not self.conf_iou_low < self.conf_iou_high:
            raise ValueError("conf_iou_low must be below conf_iou_high")
        object.__setattr__(self, "levels_for_gof", tuple(int(i) for i in self.levels_for_gof))

    def gof_levels(self, n_levels: int) -> list[int]:
        """Resolve ``levels_for_gof`` (may be negative) to sorted level positions."""
        out = []
        for i in self.levels_for_gof:
            j = i + n_levels if i < 0 else i
            if not 0 <= j < n_levels:
                raise ValueError(f"GoF level {i} not available among {n_levels} levels")
            out.append(j)
        return sorted(set(out))

    def with_toggles(self, gof: bool, lof: bool, fda: bool) -> "FusionConfig":
        return replace(self, enable_gof=gof, enable_lof=lof, enable_fda=fda)


def _pie_prefix(mode: str) -> str:
    return f"pie.{mode.lower()}"


def model_param_spec(vcfg: VoxelConfig, cfg: FusionConfig):
    """Every learned tensor of the pipeline, names and shapes."""
    C, Cv, Ci = cfg.grid_channels, cfg.voxel_channels, cfg.image_channels
    gof = cfg.gof_levels(len(vcfg.levels))
    spec = list(backbone_param_spec(vcfg, cfg.point_channels, Cv))
    for li in gof:
        spec += deform_attn_param_spec(f"gof.l{li}.attn", Cv, Ci, cfg.heads, cfg.points)
        spec += ffn_param_spec(f"gof.l{li}.reduce", 2 * Cv, Cv)
    spec += [("pool.w", (C, len(gof) * Cv)), ("pool.b", (C,))]
    for mode in PIE_MODES:
        n_in = 7 if mode == "XYZ_D" else 10
        spec += ffn_param_spec(_pie_prefix(mode), n_in, C, hidden=C)
    spec += deform_attn_param_spec("lof.attn", C, Ci, cfg.heads, cfg.points)
    spec += ffn_param_spec("lof.reduce", 2 * C, C)
    spec += encoder_param_spec("fda.encoder", C)
    spec += ffn_param_spec("fda.rcb", C, C)
    flat = cfg.u ** 3 * C
    H = cfg.refine_hidden
    spec += ffn_param_spec("refine.cls", flat, 1, hidden=H)
    spec += [
        ("refine.reg.w1", (H, flat)),
        ("refine.reg.b1", (H,)),
        # zero-initialized: an untrained head returns the proposal unchanged
        ("refine.reg.out.offset", (7, H)),
        ("refine.reg.out_bias.offset", (7,)),
    ]
    return spec


# ---------------------------------------------------------------------------
# Camera assignment


def assign_cameras(points: np.ndarray, cams: Sequence[CameraModel]):
    """Pick one camera per point.

    Among cameras where the point projects inside the image, the one whose
    horizontal pixel coordinate is closest to its principal point wins; ties
    go to the earlier camera. Returns ``(camera_index, uv)`` with index -1
    where no camera sees the point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not cams or n == 0:
        return np.full(n, -1, dtype=np.int64), np.zeros((n, 2))
    scores = np.full((len(cams), n), np.inf)
    uvs = np.zeros((len(cams), n, 2))
    for c, cam in enumerate(cams):
        uv, _, valid = project_points(cam, pts)
        uvs[c] = uv
        scores[c, valid] = np.abs(uv[valid, 0] - cam.principal_x)
    best = np.argmin(scores, axis=0)
    seen = np.isfinite(scores[best, np.arange(n)])
    cam_idx = np.where(seen, best, -1)
    uv = uvs[best, np.arange(n)]
    uv[~seen] = 0.0
    return cam_idx, uv


def _cross_modal(queries: np.ndarray, anchors: np.ndarray, fms: Sequence[FeatureMap],
                 cams: Sequence[CameraModel], attn: DeformAttnParams) -> np.ndarray:
    """Attended image feature per query; zeros for anchors no camera sees."""
    cam_idx, uv = assign_cameras(anchors, cams)
    attended = np.zeros((len(queries), attn.query_dim), dtype=get_dtype())
    for c in np.unique(cam_idx[cam_idx >= 0]):
        rows = np.flatnonzero(cam_idx == c)
        attended[rows] = deform_attn_batch(queries[rows], fms[c], uv[rows], attn)
    return attended


# ---------------------------------------------------------------------------
# Global fusion


def global_fuse(maps: Sequence[SparseVoxelMap], fms: Sequence[FeatureMap], cams: Sequence[CameraModel],
                params: ParamStore, cfg: FusionConfig) -> dict[int, SparseVoxelMap]:
    """Fuse image features into the voxel features of the selected levels.

    Returns ``{level position: fused map}``.
    """
    if len(fms) != len(cams):
        raise ValueError("need one feature map per camera")
    fused = {}
    for li in cfg.gof_levels(len(maps)):
        vmap = maps[li]
        attn = DeformAttnParams.from_store(params, f"gof.l{li}.attn")
        params.require(n for n, _ in ffn_param_spec(f"gof.l{li}.reduce", 1, 1))
        feats = np.asarray(vmap.features, dtype=get_dtype())
        attended = _cross_modal(feats, vmap.centroids, fms, cams, attn)
        fused[li] = vmap.with_features(concat_reduce(feats, attended, params, f"gof.l{li}.reduce"))
    return fused


class NeighborIndex:
    """KD-trees over the voxel centroids of each fused level."""

    def __init__(self, fused: Mapping[int, SparseVoxelMap]):
        self.levels = sorted(fused)
        self.maps = [fused[li] for li in self.levels]
        self.trees = [cKDTree(m.centroids) if len(m) else None for m in self.maps]

    def radius(self, pos: int, factor: float) -> float:
        return factor * float(np.linalg.norm(self.maps[pos].voxel_size))


def roi_grid_pool(fused, grid: RoiGrid, params: ParamStore, cfg: FusionConfig):
    """Inverse-distance pooling of the nearest fused voxels onto grid centres.

    For each level, up to ``pool_neighbors`` voxels whose centroid lies within
    ``pool_radius_factor`` voxel diagonals are averaged with weights
    ``1 / (d + 1e-6)``. Level results are concatenated and projected to the
    grid width. Returns ``(features, found)`` where ``found`` flags grid
    points with at least one neighbour on some level.
    """
    index = fused if isinstance(fused, NeighborIndex) else NeighborIndex(fused)
    centers = grid.centers
    n = len(centers)
    dtype = get_dtype()
    pooled = []
    found = np.zeros(n, dtype=bool)
    for pos, (vmap, tree) in enumerate(zip(index.maps, index.trees)):
        C = vmap.features.shape[1]
        level_feat = np.zeros((n, C), dtype=dtype)
        if tree is not None:
            k = min(cfg.pool_neighbors, len(vmap))
            radius = index.radius(pos, cfg.pool_radius_factor)
            dist, idx = tree.query(centers, k=k, distance_upper_bound=np.nextafter(radius, np.inf))
            dist = dist.reshape(n, k)
            idx = idx.reshape(n, k)
            ok = np.isfinite(dist)
            w = np.where(ok, 1.0 / (np.where(ok, dist, 1.0) + _IDW_EPS), 0.0)
            wsum = w.sum(axis=1)
            has = wsum > 0
            feats = np.asarray(vmap.features, dtype=np.float64)[np.where(ok, idx, 0)]
            agg = np.einsum("nk,nkc->nc", w, feats)
            agg[has] /= wsum[has, None]
            level_feat = agg.astype(dtype)
            found |= has
        pooled.append(level_feat)
    stacked = np.concatenate(pooled, axis=1) if pooled else np.zeros((n, 0), dtype=dtype)
    out = linear(stacked, params["pool.w"], params["pool.b"])
    out[~found] = 0
    return out, found


# ---------------------------------------------------------------------------
# Local fusion


@dataclass(frozen=True)
class CellStats:
    counts: np.ndarray  # (u^3,)
    log_counts: np.ndarray  # D per cell
    centroid_offsets: np.ndarray  # R per cell, canonical frame


def cell_statistics(box: Box7, grid: RoiGrid, points: PointCloud, tau: float) -> CellStats:
    u = grid.u
    n_cells = u ** 3
    xyz = points.xyz
    # coarse reject before the exact canonical test
    near = np.hypot(xyz[:, 0] - box.center[0], xyz[:, 1] - box.center[1]) <= box.bev_diagonal / 2 + 1e-6
    local = world_to_canonical(box, xyz[near])
    size = np.asarray(box.size)
    inside = np.all(np.abs(local) <= size / 2 + 1e-9, axis=1)
    local = local[inside]
    cell = np.floor((local + size / 2) / size * u).astype(np.int64)
    cell = np.clip(cell, 0, u - 1)
    flat = (cell[:, 0] * u + cell[:, 1]) * u + cell[:, 2]
    counts = np.bincount(flat, minlength=n_cells)
    sums = np.stack([np.bincount(flat, weights=local[:, a], minlength=n_cells) for a in range(3)], axis=1)
    offsets = np.zeros((n_cells, 3))
    filled = counts > 0
    offsets[filled] = sums[filled] / counts[filled, None] - grid.local_offsets[filled]
    return CellStats(counts=counts, log_counts=np.log(counts + tau), centroid_offsets=offsets)


def pie_inputs(box: Box7, grid: RoiGrid, stats: CellStats, mode: str) -> np.ndarray:
    n = len(grid.local_offsets)
    cols = [grid.local_offsets, np.broadcast_to(np.asarray(box.center), (n, 3)), stats.log_counts[:, None]]
    if mode == "XYZ_D_R":
        cols.append(stats.centroid_offsets)
    elif mode != "XYZ_D":
        raise ValueError(f"unknown pie mode {mode!r}")
    return np.concatenate(cols, axis=1)


def pie_encode(box: Box7, grid: RoiGrid, points: PointCloud, params: ParamStore, cfg: FusionConfig):
    """Position-information grid features; returns ``(features, stats)``."""
    stats = cell_statistics(box, grid, points, cfg.tau)
    x = pie_inputs(box, grid, stats, cfg.pie_mode)
    return ffn(x, params, _pie_prefix(cfg.pie_mode)), stats


def local_fuse(grid: RoiGrid, pie_features: np.ndarray, fms: Sequence[FeatureMap], cams: Sequence[CameraModel],
               params: ParamStore, cfg: FusionConfig) -> np.ndarray:
    attn = DeformAttnParams.from_store(params, "lof.attn")
    params.require(n for n, _ in ffn_param_spec("lof.reduce", 1, 1))
    q = np.asarray(pie_features, dtype=get_dtype())
    attended = _cross_modal(q, grid.centers, fms, cams, attn)
    return concat_reduce(q, attended, params, "lof.reduce")


# ---------------------------------------------------------------------------
# Aggregation


@dataclass
class ProposalFeatures:
    pie: np.ndarray
    local: np.ndarray
    global_: np.ndarray
    valid_mask: np.ndarray
    fused: np.ndarray = field(init=False)
    refined: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.fused = (self.pie + self.local) + self.global_

    @classmethod
    def build(cls, pie, local=None, global_=None, valid_mask=None) -> "ProposalFeatures":
        pie = np.asarray(pie)
        zeros = np.zeros_like(pie)
        local = zeros if local is None else np.asarray(local, dtype=pie.dtype)
        global_ = zeros if global_ is None else np.asarray(global_, dtype=pie.dtype)
        mask = np.ones(len(pie), dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
        return cls(pie, local, global_, mask)


def fda_aggregate(pf: ProposalFeatures, params: ParamStore, cfg: FusionConfig) -> np.ndarray:
    """Self-attention over non-empty grid points, then a residual FFN block; flattened row-major."""
    tokens = pf.fused
    if cfg.enable_fda and pf.valid_mask.any():
        tokens = self_attn_layer(tokens, pf.valid_mask, params, "fda.encoder")
        valid = tokens[pf.valid_mask]
        tokens = tokens.copy()
        tokens[pf.valid_mask] = layer_norm(valid + ffn(valid, params, "fda.rcb"))
    flat = np.ascontiguousarray(tokens).reshape(-1)
    pf.refined = flat
    return flat


# ---------------------------------------------------------------------------
# Refinement head


def decode_box(proposal: Box7, residual: Sequence[float]) -> Box7:
    """Apply (dx, dy, dz, dlog_l, dlog_w, dlog_h, dtheta); centre deltas are in BEV-diagonal units."""
    r = [float(v) for v in residual]
    diag = proposal.bev_diagonal
    center = tuple(c + d * diag for c, d in zip(proposal.center, r[0:3]))
    size = tuple(s * math.exp(d) for s, d in zip(proposal.size, r[3:6]))
    return Box7(center, size, normalize_heading(proposal.heading + r[6]))


def encode_box(target: Box7, anchor: Box7) -> np.ndarray:
    diag = anchor.bev_diagonal
    dc = [(t - a) / diag for t, a in zip(target.center, anchor.center)]
    ds = [math.log(t / a) for t, a in zip(target.size, anchor.size)]
    return np.array(dc + ds + [normalize_heading(target.heading - anchor.heading)])


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def refine(flattened: np.ndarray, proposal: Box7, params: ParamStore):
    """Confidence and refined box from the flattened grid feature."""
    x = np.asarray(flattened, dtype=get_dtype())
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite refinement input")
    logit = float(ffn(x, params, "refine.cls")[0])
    h = relu(linear(x, params["refine.reg.w1"], params["refine.reg.b1"]))
    residual = linear(h, params["refine.reg.out.offset"], params["refine.reg.out_bias.offset"])
    return _sigmoid(logit), decode_box(proposal, residual.astype(np.float64))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    conf: float
    reg: float
    rpn: float = 0.0
    # no region proposal network exists here, so its loss term is never computed
    rpn_computed: bool = False


def smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    ax = np.abs(x)
    if beta <= 0:
        return ax
    return np.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def confidence_target(iou: float, cfg: FusionConfig) -> float:
    t = (iou - cfg.conf_iou_low) / (cfg.conf_iou_high - cfg.conf_iou_low)
    return min(max(t, 0.0), 1.0)


def detection_loss(confidence: float, refined: Box7, target: Box7, iou: float, cfg: FusionConfig,
                   anchor: Box7 | None = None) -> LossBreakdown:
    """Confidence BCE against an IoU ramp plus gated smooth-L1 box regression.

    Residuals are encoded relative to ``anchor`` (the proposal); without one
    the refined box serves as its own anchor.
    """
    values = [confidence, iou, *refined.as_array(), *target.as_array()]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("non-finite loss inputs")
    eps = 1e-12
    p = min(max(confidence, eps), 1.0 - eps)
    t = confidence_target(iou, cfg)
    conf = -(t * math.log(p) + (1.0 - t) * math.log(1.0 - p))
    reg = 0.0
    if iou > cfg.reg_iou_gate:
        anchor = refined if anchor is None else anchor
        diff = encode_box(refined, anchor) - encode_box(target, anchor)
        diff[6] = normalize_heading(diff[6])
        reg = float(np.sum(smooth_l1(diff, cfg.smooth_l1_beta)))
    return LossBreakdown(total=conf + cfg.alpha * reg, conf=conf, reg=reg)
