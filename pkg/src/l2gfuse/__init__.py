"""Local-to-global LiDAR/camera fusion: inference engine and verification harness."""

from .geometry import Box7, CameraModel, RoiGrid, iou_3d, project_point, rotated_bev_iou, split_box_grid
from .kernels import FeatureMap, ParamStore, init_params
from .voxel import PointCloud, SparseVoxelMap, VoxelConfig, voxelize

__version__ = "0.1.0"

__all__ = [
    "Box7",
    "CameraModel",
    "FeatureMap",
    "ParamStore",
    "PointCloud",
    "RoiGrid",
    "SparseVoxelMap",
    "VoxelConfig",
    "init_params",
    "iou_3d",
    "project_point",
    "rotated_bev_iou",
    "split_box_grid",
    "voxelize",
]
