"""Per-scale transformer encoder mapping cell descriptors to features."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .io import CameraView
from .ndt import DEFAULT_DEPTH_TOLERANCE, DESCRIPTOR_DIM, NdtGrid, canonicalize, project_to_cells
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import (attention_layout, ffn, ffn_layout, layer_norm, layer_norm_layout,
                        linear, linear_layout, multi_head_attention)
from .nn.params import ParamStore

MIN_WAVELENGTH = 0.1
MAX_WAVELENGTH = 20.0


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row ``i`` holds the feature of canonical cell ``cell_order[i]``."""

    values: Tensor
    cell_order: np.ndarray
    means: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != len(self.cell_order):
            raise ValueError("feature rows and cell_order disagree in length")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def permuted(self, perm: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(ad.take_rows(self.values, perm), self.cell_order[perm],
                             self.means[perm])


def encoder_layout(config: PipelineConfig) -> dict:
    d = config.feature_dim
    layout = {}
    for r in range(config.scale_count):
        p = f"encoder.{r}"
        layout.update(linear_layout(f"{p}.embed", DESCRIPTOR_DIM, d))
        for layer in range(config.encoder_depth):
            b = f"{p}.block{layer}"
            layout.update(layer_norm_layout(f"{b}.norm", d))
            for proj in ("q", "k", "v"):
                # a key bias shifts each score row uniformly, which softmax ignores
                layout.update(linear_layout(f"{b}.attn.{proj}", d, d, bias=proj != "k"))
            layout.update(attention_layout(f"{b}.attn", d))
            layout.update(ffn_layout(f"{b}.ffn", d, config.ffn_hidden))
        layout.update(layer_norm_layout(f"{p}.final_norm", d))
    return layout


def positional_encoding(offsets: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal code of 3D offsets: per axis, sin/cos at ``dim // 6`` wavelengths.

    Wavelengths are log-spaced in [0.1, 20] m; leftover columns are zero.
    """
    n_freq = dim // 6
    if n_freq == 1:
        wavelengths = np.array([1.0])
    else:
        wavelengths = MIN_WAVELENGTH * (MAX_WAVELENGTH / MIN_WAVELENGTH) ** (
            np.arange(n_freq) / (n_freq - 1))
    phase = offsets[:, :, None] * (2.0 * np.pi / wavelengths)  # (N, 3, F)
    code = np.stack([np.sin(phase), np.cos(phase)], axis=-1).reshape(len(offsets), -1)
    out = np.zeros((len(offsets), dim))
    out[:, :code.shape[1]] = code
    return out


def encoder_block(x: Tensor, params: ParamStore, name: str, heads: int) -> Tensor:
    h = layer_norm(x, params, f"{name}.norm")
    q = linear(h, params, f"{name}.attn.q")
    k = linear(h, params, f"{name}.attn.k")
    v = linear(h, params, f"{name}.attn.v")
    x = x + multi_head_attention(q, k, v, params, f"{name}.attn", heads)
    return ffn(x, params, f"{name}.ffn")


def encode_scale(grid: NdtGrid, params: ParamStore, scale_id: int,
                 config: PipelineConfig) -> FeatureMatrix:
    """Features for every occupied cell of ``grid``, in canonical cell order.

    Descriptor means and the positional code both use offsets from the cloud
    centroid, so a rigid translation of the input leaves features unchanged.
    The covariance block is expressed in units of ``cell_size**2``.
    """
    grid = canonicalize(grid)
    prefix = f"encoder.{scale_id}"
    embed_w = f"{prefix}.embed.weight"
    if embed_w not in params:
        raise KeyError(f"no encoder parameters for scale {scale_id}")
    if params[embed_w].shape != (DESCRIPTOR_DIM, config.feature_dim):
        raise ValueError(f"{embed_w} has shape {params[embed_w].shape}, "
                         f"expected {(DESCRIPTOR_DIM, config.feature_dim)}")
    center = grid.centroid()
    desc = grid.descriptors(center=center)
    if desc.shape[1] != DESCRIPTOR_DIM:
        raise ValueError("encoder expects RGB cells (15-dim descriptors)")
    # covariance in cell units so every descriptor block is O(1)
    desc[:, 3:12] /= grid.cell_size ** 2
    x = linear(Tensor(desc), params, f"{prefix}.embed")
    x = x + Tensor(positional_encoding(grid.means - center, config.feature_dim))
    for layer in range(config.encoder_depth):
        x = encoder_block(x, params, f"{prefix}.block{layer}", config.heads)
    x = layer_norm(x, params, f"{prefix}.final_norm")
    return FeatureMatrix(x, grid.indices, grid.means)


def encode_all(grids: Sequence[NdtGrid], params: ParamStore, config: PipelineConfig,
               threads: int = 1) -> list[FeatureMatrix]:
    if len(grids) != config.scale_count:
        raise ValueError(f"{len(grids)} grids for {config.scale_count} configured scales")
    if threads > 1 and not ad.is_grad_enabled():
        from concurrent.futures import ThreadPoolExecutor

        def run(r):
            with ad.no_grad():
                return encode_scale(grids[r], params, r, config)

        with ThreadPoolExecutor(max_workers=min(threads, len(grids))) as pool:
            return list(pool.map(run, range(len(grids))))
    return [encode_scale(g, params, r, config) for r, g in enumerate(grids)]


def lift_reference_features(grid: NdtGrid, feature_views: Sequence[CameraView], dim: int,
                            depth_tolerance: float = DEFAULT_DEPTH_TOLERANCE,
                            use_depth: bool = True) -> FeatureMatrix:
    """Average externally computed per-view feature maps onto cells."""
    grid = canonicalize(grid)
    for view in feature_views:
        if view.channels != dim:
            raise ValueError(f"feature map has {view.channels} channels, expected {dim}")
    values, _ = project_to_cells(grid, feature_views, depth_tolerance, use_depth)
    return FeatureMatrix(Tensor(values), grid.indices, grid.means)
