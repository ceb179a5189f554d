"""Cameras, 7-DoF boxes, projection, rotated IoU and proposal grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Box7",
    "CameraModel",
    "RoiGrid",
    "box_corners",
    "canonical_to_world",
    "iou_3d",
    "normalize_heading",
    "points_in_box",
    "project_point",
    "project_points",
    "rotated_bev_iou",
    "split_box_grid",
    "world_to_canonical",
]

_MIN_DEPTH = 1e-6


def normalize_heading(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.pi - np.mod(np.pi - theta, 2.0 * np.pi)
    # leave in-range angles untouched so wrapping is idempotent bit for bit
    wrapped = np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box7:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    heading: float = 0.0

    def __post_init__(self) -> None:
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("Box7 needs a 3-vector center and a 3-vector size")
        if not all(math.isfinite(v) for v in center + size + (float(self.heading),)):
            raise ValueError("Box7 values must be finite")
        if min(size) <= 0:
            raise ValueError(f"box sizes must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box7":
        arr = [float(a) for a in arr]
        return cls(tuple(arr[0:3]), tuple(arr[3:6]), arr[6])

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.heading], dtype=np.float64)

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    @property
    def bev_diagonal(self) -> float:
        return math.hypot(self.size[0], self.size[1])


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_to_canonical(box: Box7, points: np.ndarray) -> np.ndarray:
    """Express world points in the box frame (origin at the centre, x along heading)."""
    pts = np.asarray(points, dtype=np.float64) - np.asarray(box.center)
    c, s = math.cos(box.heading), math.sin(box.heading)
    x = c * pts[..., 0] + s * pts[..., 1]
    y = -s * pts[..., 0] + c * pts[..., 1]
    return np.stack([x, y, pts[..., 2]], axis=-1)


def canonical_to_world(box: Box7, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(box.heading), math.sin(box.heading)
    x = c * pts[..., 0] - s * pts[..., 1]
    y = s * pts[..., 0] + c * pts[..., 1]
    return np.stack([x, y, pts[..., 2]], axis=-1) + np.asarray(box.center)


def points_in_box(box: Box7, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of points inside ``box`` (faces included)."""
    local = world_to_canonical(box, points)
    half = np.asarray(box.size) / 2.0 + tol
    return np.all(np.abs(local) <= half, axis=-1)


def box_corners(box: Box7) -> np.ndarray:
    """The 8 corners as an (8, 3) array.

    Corner ``i`` takes +l/2 when bit 0 of ``i`` is set (else -l/2), +w/2 from
    bit 1 and +h/2 from bit 2, before rotation about z and translation.
    """
    bits = np.arange(8)
    signs = np.stack([(bits >> k) & 1 for k in range(3)], axis=-1) * 2.0 - 1.0
    return canonical_to_world(box, signs * (np.asarray(box.size) / 2.0))


# ---------------------------------------------------------------------------
# Rotated IoU


def _bev_polygon(box: Box7) -> np.ndarray:
    """Counter-clockwise BEV rectangle, shape (4, 2)."""
    l, w, _ = box.size
    local = np.array([[-l, -w], [l, -w], [l, w], [-l, w]]) / 2.0
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def _polygon_area(poly: Sequence[Sequence[float]]) -> float:
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: list, clip: np.ndarray) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return output


def bev_intersection_area(a: Box7, b: Box7) -> float:
    pa, pb = _bev_polygon(a), _bev_polygon(b)
    # cheap reject on circumscribed circles
    ra, rb = a.bev_diagonal / 2.0, b.bev_diagonal / 2.0
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) > ra + rb:
        return 0.0
    clipped = _clip_polygon([tuple(p) for p in pa], pb)
    return _polygon_area(clipped)


def rotated_bev_iou(a: Box7, b: Box7) -> float:
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if a == b:
        return 1.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a: Box7, b: Box7) -> float:
    vol_a, vol_b = a.volume, b.volume
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    if a == b:
        return 1.0
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = vol_a + vol_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``extrinsic`` maps LiDAR-frame points into the camera frame."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        K = np.array(self.intrinsic, dtype=np.float64)
        E = np.array(self.extrinsic, dtype=np.float64)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError("intrinsic must be 3x3 and extrinsic 4x4")
        R = E[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("extrinsic rotation block is not orthonormal")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")
        K.setflags(write=False)
        E.setflags(write=False)
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "extrinsic", E)
        object.__setattr__(self, "image_width", int(self.image_width))
        object.__setattr__(self, "image_height", int(self.image_height))

    @property
    def projection(self) -> np.ndarray:
        return self.intrinsic @ self.extrinsic[:3, :]

    @property
    def principal_x(self) -> float:
        return float(self.intrinsic[0, 2])

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        """Inverse of :func:`project_point` for a known depth."""
        cam = np.linalg.solve(self.intrinsic, np.array([u * depth, v * depth, depth]))
        R, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        return R.T @ (cam - t)


def project_points(camera: CameraModel, points: np.ndarray):
    """Vectorized projection.

    Returns ``(uv, depth, valid)`` with ``uv`` of shape (N, 2). Rows with
    ``valid`` false are behind the camera or outside the image.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    M = camera.projection
    hom = pts @ M[:, :3].T + M[:, 3]
    depth = hom[:, 2]
    in_front = depth > _MIN_DEPTH
    safe = np.where(in_front, depth, 1.0)
    uv = hom[:, :2] / safe[:, None]
    valid = (
        in_front
        & (uv[:, 0] >= 0)
        & (uv[:, 0] < camera.image_width)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] < camera.image_height)
    )
    return uv, depth, valid


def project_point(camera: CameraModel, p: Sequence[float]) -> Optional[tuple[float, float, float]]:
    uv, depth, valid = project_points(camera, np.asarray(p, dtype=np.float64)[None, :])
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


# ---------------------------------------------------------------------------
# Proposal grids


@dataclass(frozen=True)
class RoiGrid:
    """u^3 regular cells inside a box, flattened with the x index slowest."""

    owner: Box7
    u: int
    centers: np.ndarray
    local_offsets: np.ndarray

    def cell_index(self, ix: int, iy: int, iz: int) -> int:
        return (ix * self.u + iy) * self.u + iz


def grid_canonical_centers(size: Sequence[float], u: int) -> np.ndarray:
    frac = (np.arange(u) + 0.5) / u - 0.5
    ix, iy, iz = np.meshgrid(frac, frac, frac, indexing="ij")
    unit = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=-1)
    return unit * np.asarray(size, dtype=np.float64)


def split_box_grid(box: Box7, u: int) -> RoiGrid:
    if u < 1:
        raise ValueError("grid resolution u must be >= 1")
    gamma = grid_canonical_centers(box.size, u)
    centers = canonical_to_world(box, gamma)
    gamma.setflags(write=False)
    centers.setflags(write=False)
    return RoiGrid(owner=box, u=u, centers=centers, local_offsets=gamma)
