"""Sparse voxelization with point centroids and a hash-indexed voxel lookup.

Voxel indices at every pyramid level are derived from the integer base-level
index (``base // stride``), which is the same floor as dividing by the coarse
voxel size but keeps the levels exactly nested in floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import ParamStore, get_dtype, linear, relu, splitmix64

__all__ = [
    "PointCloud",
    "SparseVoxelMap",
    "VoxelConfig",
    "VoxelHashTable",
    "VoxelEntry",
    "backbone_param_spec",
    "compute_centroid",
    "lookup_feature",
    "surrogate_backbone",
    "voxelize",
]


@dataclass(frozen=True)
class PointCloud:
    """N points in metres plus per-point extra channels (intensity, ...)."""

    xyz: np.ndarray
    extras: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        extras = self.extras
        if extras is None:
            extras = np.zeros((len(xyz), 0))
        extras = np.array(extras, dtype=np.float64)
        if extras.ndim == 1:
            extras = extras.reshape(len(xyz), -1) if len(xyz) else extras.reshape(0, 0)
        if extras.ndim != 2 or len(extras) != len(xyz):
            raise ValueError(f"extras must have one row per point, got {extras.shape}")
        xyz.setflags(write=False)
        extras.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "extras", extras)

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def channels(self) -> int:
        return self.extras.shape[1]

    def take(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.extras[index])


@dataclass(frozen=True)
class VoxelConfig:
    range_min: tuple[float, float, float] = (-75.2, -75.2, -2.0)
    range_max: tuple[float, float, float] = (75.2, 75.2, 4.0)
    base_voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.15)
    levels: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in self.range_min)
        hi = tuple(float(v) for v in self.range_max)
        vs = tuple(float(v) for v in self.base_voxel_size)
        levels = tuple(int(s) for s in self.levels)
        if not (len(lo) == len(hi) == len(vs) == 3):
            raise ValueError("ranges and voxel size must be 3-vectors")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("range_max must exceed range_min componentwise")
        if any(v <= 0 for v in vs):
            raise ValueError("voxel size must be positive")
        if not levels or levels[0] != 1:
            raise ValueError("levels must start at stride 1")
        for a, b in zip(levels, levels[1:]):
            if b <= a or b % a:
                raise ValueError("level strides must strictly increase, each dividing the next")
        object.__setattr__(self, "range_min", lo)
        object.__setattr__(self, "range_max", hi)
        object.__setattr__(self, "base_voxel_size", vs)
        object.__setattr__(self, "levels", levels)

    @property
    def base_grid_dims(self) -> tuple[int, int, int]:
        return tuple(
            int(math.ceil((b - a) / v - 1e-9))
            for a, b, v in zip(self.range_min, self.range_max, self.base_voxel_size)
        )

    def grid_dims(self, level: int) -> tuple[int, int, int]:
        return tuple(-(-d // level) for d in self.base_grid_dims)

    def voxel_size(self, level: int) -> np.ndarray:
        return np.asarray(self.base_voxel_size) * level

    def base_index(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer base-level voxel index per point and the in-range mask."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        lo, hi = np.asarray(self.range_min), np.asarray(self.range_max)
        inside = np.all((xyz >= lo) & (xyz < hi), axis=1)
        idx = np.floor((xyz - lo) / np.asarray(self.base_voxel_size)).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.base_grid_dims) - 1)
        return idx, inside


class VoxelHashTable:
    """Open-addressing table from 64-bit voxel keys to entry rows.

    Slots are addressed by the SplitMix64 finalizer of the key with linear
    probing; capacity is a power of two at least twice the entry count.
    Insertion and lookup are vectorized over all keys at once.
    """

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.uint64)
        n = len(keys)
        capacity = 16
        while capacity < 2 * n:
            capacity *= 2
        self.keys = keys
        self.mask = np.uint64(capacity - 1)
        self.slots = np.full(capacity, -1, dtype=np.int64)

        pos = (splitmix64(keys) & self.mask).astype(np.int64)
        pending = np.arange(n, dtype=np.int64)
        while pending.size:
            p = pos[pending]
            free = self.slots[p] == -1
            claim_slots, first = np.unique(p[free], return_index=True)
            winners = pending[free][first]
            self.slots[claim_slots] = winners
            placed = np.zeros(n, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            pos[pending] = (pos[pending] + 1) & (capacity - 1)

    @property
    def capacity(self) -> int:
        return len(self.slots)

    def find(self, query: np.ndarray) -> np.ndarray:
        """Entry row for each query key, -1 where absent."""
        query = np.asarray(query, dtype=np.uint64).ravel()
        result = np.full(len(query), -1, dtype=np.int64)
        pos = (splitmix64(query) & self.mask).astype(np.int64)
        active = np.arange(len(query))
        cap_mask = self.capacity - 1
        while active.size:
            rows = self.slots[pos[active]]
            empty = rows == -1
            hit = ~empty
            hit[hit] = self.keys[rows[hit]] == query[active[hit]]
            result[active[hit]] = rows[hit]
            active = active[~(empty | hit)]
            pos[active] = (pos[active] + 1) & cap_mask
        return result


@dataclass(frozen=True)
class VoxelEntry:
    feature: np.ndarray
    centroid: np.ndarray
    count: int


@dataclass(frozen=True)
class SparseVoxelMap:
    """Non-empty voxels of one pyramid level, rows sorted by linear key."""

    level: int
    grid_dims: tuple[int, int, int]
    config: VoxelConfig
    indices: np.ndarray  # (n, 3) int64
    keys: np.ndarray  # (n,) uint64
    centroids: np.ndarray  # (n, 3)
    counts: np.ndarray  # (n,) int64
    extras_mean: np.ndarray  # (n, C_p)
    features: np.ndarray  # (n, C_V)
    table: VoxelHashTable = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.config.voxel_size(self.level)

    def entry(self, row: int) -> VoxelEntry:
        return VoxelEntry(self.features[row], self.centroids[row], int(self.counts[row]))

    def voxel_centers(self) -> np.ndarray:
        return np.asarray(self.config.range_min) + (self.indices + 0.5) * self.voxel_size

    def with_features(self, features: np.ndarray) -> "SparseVoxelMap":
        features = np.asarray(features)
        if features.ndim != 2 or len(features) != len(self):
            raise ValueError(f"need ({len(self)}, C) features, got {features.shape}")
        features.setflags(write=False)
        return SparseVoxelMap(
            self.level, self.grid_dims, self.config, self.indices, self.keys,
            self.centroids, self.counts, self.extras_mean, features, self.table,
        )

    def rows_for_points(self, xyz: np.ndarray) -> np.ndarray:
        """Entry row of the voxel containing each point (-1 if empty or out of range)."""
        base, inside = self.config.base_index(xyz)
        keys = _linear_key(base // self.level, self.grid_dims)
        rows = self.table.find(keys)
        rows[~inside] = -1
        return rows


def _linear_key(idx: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    idx = idx.astype(np.uint64)
    X, Y = np.uint64(dims[0]), np.uint64(dims[1])
    return idx[:, 0] + X * (idx[:, 1] + Y * idx[:, 2])


def compute_centroid(points_in_voxel) -> np.ndarray:
    pts = np.asarray(points_in_voxel, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty voxel")
    return pts.sum(axis=0) / len(pts)


def _snap_into_voxel(centroids: np.ndarray, indices: np.ndarray, cfg: VoxelConfig, level: int) -> np.ndarray:
    # A mean can round one ulp across the voxel's upper face; nudge it back so
    # the centroid always hashes to its own voxel.
    for _ in range(8):
        base, _ = cfg.base_index(centroids)
        wrong = np.any(base // level != indices, axis=1)
        if not wrong.any():
            break
        center = np.asarray(cfg.range_min) + (indices[wrong] + 0.5) * cfg.voxel_size(level)
        centroids[wrong] = np.nextafter(centroids[wrong], center)
    return centroids


def _canonical_order(keys: np.ndarray, xyz: np.ndarray, extras: np.ndarray) -> np.ndarray:
    """Sort by voxel key, breaking ties inside shared voxels by coordinates then extras.

    Fixing the order in which a voxel's points are summed makes the result
    independent of input order; single-point voxels need no tie-break, so the
    full lexicographic sort only runs over points that share a voxel.
    """
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if len(sk) < 2:
        return order
    dup = np.r_[sk[1:] == sk[:-1], False] | np.r_[False, sk[1:] == sk[:-1]]
    if dup.any():
        sub = order[dup]
        cols = [extras[sub, c] for c in range(extras.shape[1])[::-1]]
        order[dup] = sub[np.lexsort(cols + [xyz[sub, 2], xyz[sub, 1], xyz[sub, 0], keys[sub]])]
    return order


def voxelize(points: PointCloud, cfg: VoxelConfig, level: int = 1) -> SparseVoxelMap:
    """Group in-range points into voxels of stride ``level``.

    Points are put in a canonical order before accumulation, so the result is
    bitwise independent of input ordering.
    """
    if level not in cfg.levels:
        raise ValueError(f"level {level} is not one of {cfg.levels}")
    dims = cfg.grid_dims(level)
    base, inside = cfg.base_index(points.xyz)
    xyz = points.xyz[inside]
    extras = points.extras[inside]
    idx = base[inside] // level
    keys = _linear_key(idx, dims)

    order = _canonical_order(keys, xyz, extras)
    xyz, extras, idx, keys = xyz[order], extras[order], idx[order], keys[order]

    # keys are sorted now: runs of equal keys are the voxels
    first = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]]) if len(keys) else np.zeros(0, np.int64)
    uniq = keys[first]
    n = len(uniq)
    counts = np.diff(np.r_[first, len(keys)]).astype(np.int64)
    inverse = np.repeat(np.arange(n), counts)
    centroids = np.empty((n, 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(inverse, weights=xyz[:, axis], minlength=n) / counts
    extras_mean = np.empty((n, extras.shape[1]))
    for c in range(extras.shape[1]):
        extras_mean[:, c] = np.bincount(inverse, weights=extras[:, c], minlength=n) / counts
    indices = idx[first]
    centroids = _snap_into_voxel(centroids, indices, cfg, level)

    for arr in (indices, uniq, centroids, counts, extras_mean):
        arr.setflags(write=False)
    features = np.zeros((n, 0))
    return SparseVoxelMap(
        level=level,
        grid_dims=dims,
        config=cfg,
        indices=indices,
        keys=uniq,
        centroids=centroids,
        counts=counts,
        extras_mean=extras_mean,
        features=features,
        table=VoxelHashTable(uniq),
    )


def lookup_feature(vmap: SparseVoxelMap, centroid) -> Optional[VoxelEntry]:
    """Hash the voxel containing ``centroid`` and return its entry, if any."""
    row = vmap.rows_for_points(np.asarray(centroid, dtype=np.float64)[None, :])[0]
    if row < 0:
        return None
    return vmap.entry(int(row))


# ---------------------------------------------------------------------------
# Surrogate featurizer


def voxel_statistics(vmap: SparseVoxelMap) -> np.ndarray:
    """Per-voxel input statistics: normalized centroid offset, log count, mean extras."""
    offset = (vmap.centroids - vmap.voxel_centers()) / vmap.voxel_size
    log_count = np.log(vmap.counts.astype(np.float64))[:, None]
    return np.concatenate([offset, log_count, vmap.extras_mean], axis=1)


def backbone_param_spec(cfg: VoxelConfig, point_channels: int, voxel_channels: int):
    n_stats = 4 + point_channels
    spec = []
    for i, _ in enumerate(cfg.levels):
        n_in = n_stats if i == 0 else n_stats + voxel_channels
        spec += [(f"backbone.l{i}.w", (voxel_channels, n_in)), (f"backbone.l{i}.b", (voxel_channels,))]
    return spec


def surrogate_backbone(points: PointCloud, cfg: VoxelConfig, params: ParamStore) -> list[SparseVoxelMap]:
    """Deterministic stand-in for a sparse-convolution backbone.

    Each level maps voxel statistics (plus, above the finest level, the mean
    feature of its child voxels) through a linear layer and a ReLU.
    """
    params.require(n for i in range(len(cfg.levels)) for n in (f"backbone.l{i}.w", f"backbone.l{i}.b"))
    maps: list[SparseVoxelMap] = []
    for i, level in enumerate(cfg.levels):
        vmap = voxelize(points, cfg, level)
        stats = voxel_statistics(vmap)
        if i > 0:
            child = maps[-1]
            ratio = level // child.level
            parent_rows = vmap.table.find(_linear_key(child.indices // ratio, vmap.grid_dims))
            n_children = np.bincount(parent_rows, minlength=len(vmap)).astype(np.float64)
            pooled = np.empty((len(vmap), child.features.shape[1]))
            for c in range(child.features.shape[1]):
                pooled[:, c] = np.bincount(
                    parent_rows, weights=child.features[:, c].astype(np.float64), minlength=len(vmap)
                )
            pooled /= np.maximum(n_children, 1.0)[:, None]
            stats = np.concatenate([stats, pooled], axis=1)
        W, b = params[f"backbone.l{i}.w"], params[f"backbone.l{i}.b"]
        if W.shape[1] != stats.shape[1]:
            raise ValueError(f"backbone level {i} expects {W.shape[1]} inputs, got {stats.shape[1]}")
        feats = relu(linear(stats, W, b)) if len(vmap) else np.zeros((0, W.shape[0]), dtype=get_dtype())
        maps.append(vmap.with_features(feats))
    return maps
