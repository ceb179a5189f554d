"""Seeded synthetic scenes: box-surface point clouds, ring cameras, surrogate image features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box7, CameraModel, canonical_to_world, iou_3d, normalize_heading, project_points
from .kernels import FeatureMap, _splitmix_stream, _stream_key
from .voxel import PointCloud, VoxelConfig

__all__ = [
    "CLASS_NAMES",
    "CLASS_SIZE_PRIORS",
    "Scene",
    "generate_scene",
    "perturb_boxes",
    "render_feature_map",
    "splat_counts",
]

CLASS_NAMES = ("Vehicle", "Pedestrian", "Cyclist")
# (l, w, h) metres
CLASS_SIZE_PRIORS = {
    0: (4.7, 2.1, 1.7),
    1: (0.9, 0.9, 1.75),
    2: (1.8, 0.8, 1.8),
}
CLASS_FREQUENCIES = (0.6, 0.25, 0.15)

IMAGE_WIDTH = 480
IMAGE_HEIGHT = 320
FEATURE_STRIDE = 4
HORIZONTAL_FOV = math.radians(90.0)
_SURFACE_SHRINK = 0.98
_BLUR = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass
class Scene:
    points: PointCloud
    gt_boxes: list[Box7]
    gt_classes: list[int]
    cameras: list[CameraModel]
    feature_maps: list[FeatureMap]
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.cameras) != len(self.feature_maps):
            raise ValueError("need exactly one feature map per camera")
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("one class label per ground-truth box")


def _scene_region(cfg: VoxelConfig, extent: float) -> tuple[np.ndarray, np.ndarray]:
    lo = np.maximum(np.asarray(cfg.range_min[:2]) + 1.0, -extent)
    hi = np.minimum(np.asarray(cfg.range_max[:2]) - 1.0, extent)
    return lo, hi


def _ground_z(cfg: VoxelConfig) -> float:
    return cfg.range_min[2] + 0.3


def _sample_surface(rng: np.random.Generator, box: Box7, n: int) -> np.ndarray:
    """Points spread over the six faces in proportion to face area, pulled slightly inward."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    local = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    size = np.asarray(box.size)
    rows = np.arange(n)
    local[rows, axis] = sign * size[axis]
    local[rows, others[:, 0]] = uv[:, 0] * size[others[:, 0]]
    local[rows, others[:, 1]] = uv[:, 1] * size[others[:, 1]]
    return canonical_to_world(box, local * _SURFACE_SHRINK)


def _ring_cameras(n: int, center: np.ndarray, radius: float, height: float) -> list[CameraModel]:
    fx = IMAGE_WIDTH / 2.0 / math.tan(HORIZONTAL_FOV / 2.0)
    K = np.array([[fx, 0.0, IMAGE_WIDTH / 2.0], [0.0, fx, IMAGE_HEIGHT / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(n):
        phi = 2.0 * math.pi * i / n
        pos = np.array([center[0] + radius * math.cos(phi), center[1] + radius * math.sin(phi), height])
        forward = np.array([center[0] - pos[0], center[1] - pos[1], 0.0])
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ pos
        cams.append(CameraModel(K, E, IMAGE_WIDTH, IMAGE_HEIGHT))
    return cams


def splat_counts(points: PointCloud, camera: CameraModel, stride: int = FEATURE_STRIDE):
    """Per-cell point count, summed inverse depth and summed intensity."""
    H = -(-camera.image_height // stride)
    W = -(-camera.image_width // stride)
    uv, depth, valid = project_points(camera, points.xyz)
    col = np.floor(uv[valid, 0] / stride).astype(np.int64)
    row = np.floor(uv[valid, 1] / stride).astype(np.int64)
    flat = row * W + col
    counts = np.bincount(flat, minlength=H * W).reshape(H, W)
    inv_depth = np.bincount(flat, weights=1.0 / depth[valid], minlength=H * W).reshape(H, W)
    intensity = points.extras[valid, 0] if points.channels else np.zeros(int(valid.sum()))
    inten = np.bincount(flat, weights=intensity, minlength=H * W).reshape(H, W)
    return counts, inv_depth, inten


def _blur(channel: np.ndarray) -> np.ndarray:
    padded = np.pad(channel, 1)
    H, W = channel.shape
    out = np.zeros_like(channel)
    for dy in range(3):
        for dx in range(3):
            out += _BLUR[dy, dx] * padded[dy:dy + H, dx:dx + W]
    return out


def render_feature_map(scene: Scene, camera: CameraModel, channels: int, seed: int,
                       stride: int = FEATURE_STRIDE) -> FeatureMap:
    """Geometry-derived stand-in for a learned image feature map.

    Projected points are binned into cells (mean inverse depth, mean
    intensity, occupancy), blurred with a 3x3 binomial kernel and lifted to
    ``channels`` by a seeded bias-free linear map.
    """
    counts, inv_depth, inten = splat_counts(scene.points, camera, stride)
    filled = counts > 0
    safe = np.maximum(counts, 1)
    base = np.stack(
        [np.where(filled, inv_depth / safe, 0.0), np.where(filled, inten / safe, 0.0), filled.astype(np.float64)],
        axis=-1,
    )
    base = np.stack([_blur(base[..., c]) for c in range(3)], axis=-1)
    bits = _splitmix_stream(_stream_key(seed, "render.lift"), channels * 3)
    lift = ((bits >> np.uint64(11)).astype(np.float64) / (1 << 53) * 2.0 - 1.0).reshape(channels, 3)
    return FeatureMap(base @ lift.T, stride=stride)


def generate_scene(seed: int, n_objects: int, n_cameras: int, points_per_object: int, clutter_ratio: float,
                   cfg: VoxelConfig, image_channels: int = 16, extent: float = 30.0,
                   max_retries: int = 200) -> Scene:
    if n_objects < 0 or n_cameras < 0 or points_per_object < 0 or clutter_ratio < 0:
        raise ValueError("counts and clutter ratio must be non-negative")
    rng = np.random.default_rng(seed)
    lo, hi = _scene_region(cfg, extent)
    if np.any(hi <= lo):
        raise ValueError("scene region is empty for this range")
    ground = _ground_z(cfg)

    boxes: list[Box7] = []
    classes: list[int] = []
    for _ in range(n_objects):
        cls = int(rng.choice(3, p=CLASS_FREQUENCIES))
        prior = np.asarray(CLASS_SIZE_PRIORS[cls])
        for _attempt in range(max_retries):
            size = prior * rng.uniform(0.9, 1.1, size=3)
            xy = rng.uniform(lo, hi)
            heading = rng.uniform(-math.pi, math.pi)
            cz = ground + size[2] / 2.0
            if cz + size[2] / 2.0 >= cfg.range_max[2]:
                raise ValueError("placement failure: range too shallow for object heights")
            cand = Box7((xy[0], xy[1], cz), tuple(size), heading)
            clear = all(
                math.hypot(xy[0] - b.center[0], xy[1] - b.center[1]) > (cand.bev_diagonal + b.bev_diagonal) / 2 + 0.2
                for b in boxes
            )
            if clear:
                boxes.append(cand)
                classes.append(cls)
                break
        else:
            raise ValueError(f"placement failure after {max_retries} retries")

    xyz_parts, inten_parts = [], []
    for box in boxes:
        xyz_parts.append(_sample_surface(rng, box, points_per_object))
        base = rng.uniform(0.2, 0.8)
        inten_parts.append(np.clip(base + rng.normal(0.0, 0.05, points_per_object), 0.0, 1.0))
    n_clutter = int(round(clutter_ratio * max(n_objects * points_per_object, points_per_object)))
    clutter_xy = rng.uniform(lo, hi, size=(n_clutter, 2))
    clutter_z = ground + rng.uniform(-0.2, 0.1, size=n_clutter)
    xyz_parts.append(np.column_stack([clutter_xy, clutter_z]))
    inten_parts.append(rng.uniform(0.0, 0.3, size=n_clutter))

    xyz = np.concatenate(xyz_parts) if xyz_parts else np.zeros((0, 3))
    inten = np.concatenate(inten_parts) if inten_parts else np.zeros(0)
    eps = 1e-6
    xyz = np.clip(xyz, np.asarray(cfg.range_min) + eps, np.asarray(cfg.range_max) - eps)
    points = PointCloud(xyz, inten[:, None])

    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(hi - lo)) / 2.0 + 5.0
    cams = _ring_cameras(n_cameras, center, radius, ground + 1.6)
    meta = dict(n_objects=n_objects, n_cameras=n_cameras, points_per_object=points_per_object,
                clutter_ratio=clutter_ratio, image_channels=image_channels, extent=extent)
    geometry_only = Scene(points, boxes, classes, [], [], seed, meta)
    fms = [render_feature_map(geometry_only, cam, image_channels, seed * 1000 + i) for i, cam in enumerate(cams)]
    return Scene(points, boxes, classes, cams, fms, seed, meta)


def perturb_boxes(gt: Sequence[Box7], seed: int, center_sigma: float = 0.0, size_sigma: float = 0.0,
                  heading_sigma: float = 0.0) -> list[tuple[Box7, float]]:
    """Gaussian-jittered copies of ``gt`` with their 3D IoU to the source box as score."""
    if min(center_sigma, size_sigma, heading_sigma) < 0:
        raise ValueError("noise sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for box in gt:
        dc = rng.normal(0.0, 1.0, 3) * center_sigma
        ds = rng.normal(0.0, 1.0, 3) * size_sigma
        dh = rng.normal() * heading_sigma
        prop = Box7(
            tuple(np.asarray(box.center) + dc),
            tuple(np.asarray(box.size) * np.exp(ds)),
            normalize_heading(box.heading + dh),
        )
        out.append((prop, iou_3d(prop, box)))
    return out
