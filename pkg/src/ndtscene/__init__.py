"""Multi-scale NDT tokenization of point clouds with a query decoder."""
from .config import LossWeights, PipelineConfig, load_config
from .errors import ConfigError, EmptyPromptError, FormatError, NonFiniteError, VersionMismatchError
from .io import (CameraView, PointCloud, TokenBundle, load_camera_rig, load_point_cloud,
                 read_point_mask, read_tokens, write_point_cloud, write_point_mask, write_tokens)
from .msdec import MockEndpoint, PromptInput, decode_segmentation, mask_to_points, run_msdec
from .ndt import (MultiScaleNdt, NdtGrid, build_multiscale, build_ndt_grid, colorize_cells,
                  merge_cell_stats, voxel_downsample)
from .pipeline import compare_downsample, init_params, scene_stats, segment_cloud, tokenize_cloud

__version__ = "0.1.0"

__all__ = [
    "LossWeights", "PipelineConfig", "load_config",
    "ConfigError", "EmptyPromptError", "FormatError", "NonFiniteError", "VersionMismatchError",
    "CameraView", "PointCloud", "TokenBundle", "load_camera_rig", "load_point_cloud",
    "read_point_mask", "read_tokens", "write_point_cloud", "write_point_mask", "write_tokens",
    "MockEndpoint", "PromptInput", "decode_segmentation", "mask_to_points", "run_msdec",
    "MultiScaleNdt", "NdtGrid", "build_multiscale", "build_ndt_grid", "colorize_cells",
    "merge_cell_stats", "voxel_downsample",
    "compare_downsample", "init_params", "scene_stats", "segment_cloud", "tokenize_cloud",
]
