"""End-to-end orchestration: tokenize, segment, downsampling comparison, stats."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .encoder import FeatureMatrix, encode_all, encoder_layout
from .errors import ConfigError
from .io import CameraView, PointCloud, TokenBundle
from .msdec import (PromptInput, QuerySet, SegmentationResult, align_tokens, decode_segmentation,
                    embed_prompt, mask_to_points, msdec_layout, run_msdec)
from .ndt import MultiScaleNdt, build_multiscale, colorize_cells, voxel_downsample
from .nn import autodiff as ad
from .nn.params import ParamStore

log = logging.getLogger(__name__)

BYTES_PER_FLOAT = 4


def model_layout(config: PipelineConfig) -> dict:
    return {**encoder_layout(config), **msdec_layout(config)}


def init_params(config: PipelineConfig) -> ParamStore:
    return ParamStore.initialize(model_layout(config), config.seed)


def check_params(params: ParamStore, config: PipelineConfig) -> None:
    expected = {name: shape for name, (shape, _) in model_layout(config).items()}
    actual = params.shapes()
    missing = sorted(set(expected) - set(actual))
    wrong = sorted(n for n in expected if n in actual and tuple(actual[n]) != tuple(expected[n]))
    if missing or wrong:
        detail = (missing + wrong)[:5]
        raise ConfigError(f"checkpoint does not match config ({len(missing)} missing, "
                          f"{len(wrong)} mis-shaped; e.g. {detail})")


@dataclass(frozen=True, eq=False)
class SceneEncoding:
    multiscale: MultiScaleNdt
    features: list[FeatureMatrix]
    prompt_query: object = None


def encode_scene(cloud: PointCloud, config: PipelineConfig, params: ParamStore,
                 views: Sequence[CameraView] | None = None, prompt: PromptInput | None = None,
                 threads: int = 1) -> SceneEncoding:
    ms = build_multiscale(cloud, config.scales, config.regularization, threads)
    if views:
        ms = MultiScaleNdt(tuple(colorize_cells(g, views, config.depth_tolerance,
                                                config.use_depth_test) for g in ms.grids),
                           ms.scale_config)
    else:
        log.warning("no camera rig given; cells carry zero color (rgb_valid=false)")
    features = encode_all(ms.grids, params, config, threads)
    prompt_query = None
    if prompt is not None:
        prompt_query = embed_prompt(prompt, ms.finest, features[-1], params)
    return SceneEncoding(ms, features, prompt_query)


@dataclass(frozen=True, eq=False)
class TokenizeResult:
    bundle: TokenBundle
    encoding: SceneEncoding
    queries: QuerySet


def tokenize_cloud(cloud: PointCloud, config: PipelineConfig, params: ParamStore,
                   views: Sequence[CameraView] | None = None, prompt: PromptInput | None = None,
                   threads: int = 1) -> TokenizeResult:
    """Grid, colorize, encode, decode and align a cloud into a token bundle."""
    with ad.no_grad():
        enc = encode_scene(cloud, config, params, views, prompt, threads)
        q = run_msdec(enc.features, params, config, enc.prompt_query)
        meta = {"cell_counts": [len(g) for g in enc.multiscale.grids], "point_count": cloud.count}
        bundle = align_tokens(q, params, config, meta)
    return TokenizeResult(bundle, enc, q)


@dataclass(frozen=True, eq=False)
class SegmentResult:
    segmentation: SegmentationResult
    point_mask: np.ndarray
    encoding: SceneEncoding


def segment_cloud(cloud: PointCloud, config: PipelineConfig, params: ParamStore, hidden,
                  views: Sequence[CameraView] | None = None, prompt: PromptInput | None = None,
                  threads: int = 1) -> SegmentResult:
    with ad.no_grad():
        enc = encode_scene(cloud, config, params, views, prompt, threads)
        seg = decode_segmentation(hidden, enc.features, params, config, enc.prompt_query)
    points = mask_to_points(seg.mask, enc.multiscale.finest, cloud)
    return SegmentResult(seg, points, enc)


# ------------------------------------------------------------ analysis

DOWNSAMPLE_COLUMNS = (
    "scale", "cell_size", "ndt_cells", "downsample_points",
    "downsample_rms_distance", "ndt_rms_mahalanobis",
    "ndt_mean_cov_trace", "downsample_mean_cov_trace",
    "ndt_bytes_per_cell", "downsample_bytes_per_point",
    "ndt_total_bytes", "downsample_total_bytes",
)


def compare_downsample(cloud: PointCloud, config: PipelineConfig) -> list[dict]:
    """Per-scale comparison of NDT cells against the centroid baseline.

    The baseline keeps one centroid per occupied cell, so both sides have the
    same count. The distance column measures how far member points sit from
    their centroid (all the baseline can say about them); the Mahalanobis
    column measures the same residuals under the cell's Gaussian
    ``(mean, cov + eps I)``.
    """
    eps = config.regularization if config.regularization > 0 else 1e-6
    ms = build_multiscale(cloud, config.scales)
    rows = []
    for r, grid in enumerate(ms.grids):
        ds = voxel_downsample(cloud, grid.cell_size, grid.origin)
        resid = cloud.positions - grid.means[grid.point_assignment]
        inv = np.linalg.inv(grid.covariances + eps * np.eye(3))
        maha = np.einsum("ni,nij,nj->n", resid, inv[grid.point_assignment], resid)
        ndt_floats = 15
        ds_floats = 6
        rows.append({
            "scale": r,
            "cell_size": grid.cell_size,
            "ndt_cells": len(grid),
            "downsample_points": ds.count,
            "downsample_rms_distance": float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1)))),
            "ndt_rms_mahalanobis": float(np.sqrt(np.mean(maha))),
            "ndt_mean_cov_trace": float(np.mean(np.trace(grid.covariances, axis1=1, axis2=2))),
            "downsample_mean_cov_trace": 0.0,
            "ndt_bytes_per_cell": ndt_floats * BYTES_PER_FLOAT,
            "downsample_bytes_per_point": ds_floats * BYTES_PER_FLOAT,
            "ndt_total_bytes": len(grid) * ndt_floats * BYTES_PER_FLOAT,
            "downsample_total_bytes": ds.count * ds_floats * BYTES_PER_FLOAT,
        })
    return rows


def scene_stats(cloud: PointCloud, config: PipelineConfig, threads: int = 1) -> dict:
    ms = build_multiscale(cloud, config.scales, config.regularization, threads)
    scales = []
    for r, grid in enumerate(ms.grids):
        scales.append({
            "scale": r, "cell_size": grid.cell_size, "cells": len(grid),
            "min_points": int(grid.counts.min()), "mean_points": float(grid.counts.mean()),
            "max_points": int(grid.counts.max()),
            "descriptor_bytes": len(grid) * 15 * BYTES_PER_FLOAT,
        })
    return {"points": cloud.count, "has_color": cloud.colors is not None,
            "raw_bytes": cloud.count * (3 + (3 if cloud.colors is not None else 0)) * BYTES_PER_FLOAT,
            "scales": scales}
