"""Multi-scale decoder: query initialization, coarse-to-fine decoding, token
alignment, prompt queries and segmentation-mask decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import PipelineConfig
from .encoder import FeatureMatrix
from .errors import EmptyPromptError
from .io import PointCloud, TokenBundle, TOKEN_VERSION
from .ndt import Box, CellSet, NdtGrid, Sphere, cell_indices, points_in_region
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import (attention_layout, ffn, ffn_layout, layer_norm, layer_norm_layout,
                        linear, linear_layout, mlp2, mlp2_layout, multi_head_attention)
from .nn.params import ParamStore, param_rng

SEG_TOKEN = "[SEG]"


def msdec_layout(config: PipelineConfig) -> dict:
    d, e = config.feature_dim, config.llm_dim
    layout = {**linear_layout("msdec.query_proj", d, d),
              **linear_layout("msdec.prompt_proj", d, d)}
    for r in range(config.scale_count):
        p = f"msdec.layer{r}"
        layout.update(layer_norm_layout(f"{p}.cross_norm", d))
        layout.update(linear_layout(f"{p}.cross.q", d, d))
        layout.update(linear_layout(f"{p}.key", d, d, bias=False))
        layout.update(linear_layout(f"{p}.value", d, d))
        layout.update(attention_layout(f"{p}.cross", d))
        layout.update(layer_norm_layout(f"{p}.self_norm", d))
        for proj in ("q", "k", "v"):
            layout.update(linear_layout(f"{p}.self.{proj}", d, d, bias=proj != "k"))
        layout.update(attention_layout(f"{p}.self", d))
        layout.update(ffn_layout(f"{p}.ffn", d, config.ffn_hidden))
    layout.update(layer_norm_layout("msdec.final_norm", d))
    layout.update(mlp2_layout("heads.mm", d, e, e))
    layout.update(mlp2_layout("heads.seg", e, d, d))
    layout.update(mlp2_layout("heads.mask", d, d, d))
    layout.update(mlp2_layout("heads.cls", d, d, config.num_classes))
    return layout


@dataclass(frozen=True, eq=False)
class QuerySet:
    base: Tensor
    prompt: Tensor | None = None
    seg: Tensor | None = None
    layer_index: int = 0

    @property
    def rows(self) -> int:
        return self.base.shape[0] + (self.prompt is not None) + (self.seg is not None)

    def stacked(self) -> Tensor:
        parts = [self.base] + [t for t in (self.prompt, self.seg) if t is not None]
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)

    def restacked(self, x: Tensor, layer_index: int) -> "QuerySet":
        m = self.base.shape[0]
        prompt = seg = None
        nxt = m
        if self.prompt is not None:
            prompt = x[nxt:nxt + 1]
            nxt += 1
        if self.seg is not None:
            seg = x[nxt:nxt + 1]
        return QuerySet(x[:m] if x.shape[0] != m else x, prompt, seg, layer_index)


# ------------------------------------------------------------ query init

def farthest_point_sampling(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy farthest-point order starting at row 0.

    Ties resolve to the lowest row. When ``m`` exceeds the number of points
    the full order is repeated cyclically.
    """
    if m < 1:
        raise ValueError("query count must be at least 1")
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty set")
    k = min(m, n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    dist = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1), out=dist)
    if m > n:
        chosen = chosen[np.arange(m) % n]
    return chosen


def init_queries(f_finest: FeatureMatrix, m: int, params: ParamStore) -> QuerySet:
    if m < 1:
        raise ValueError("query count must be at least 1")
    if f_finest.rows == 0:
        raise ValueError("finest-scale features are empty")
    picks = farthest_point_sampling(f_finest.means, m)
    return QuerySet(linear(ad.take_rows(f_finest.values, picks), params, "msdec.query_proj"))


# ------------------------------------------------------------ prompts

@dataclass(frozen=True)
class PromptInput:
    """A user click (``point``), ``box`` or explicit finest-cell ``mask``."""

    kind: str
    point: tuple[float, float, float] | None = None
    radius: float | None = None
    lower: tuple[float, float, float] | None = None
    upper: tuple[float, float, float] | None = None
    cells: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        if self.kind == "point":
            if self.point is None or (self.radius is not None and self.radius <= 0):
                raise ValueError("point prompt needs a location and positive radius")
        elif self.kind == "box":
            if self.lower is None or self.upper is None or np.any(
                    np.asarray(self.lower) > np.asarray(self.upper)):
                raise ValueError("box prompt needs lower <= upper corners")
        elif self.kind == "mask":
            if not self.cells:
                raise ValueError("mask prompt needs at least one cell index")
        else:
            raise ValueError(f"unknown prompt kind {self.kind!r}")


def prompt_mask(prompt: PromptInput, grid_finest: NdtGrid) -> np.ndarray:
    """Binary mask over finest cells selected by ``prompt``.

    A click selects cells whose mean lies within ``radius`` (default: the
    finest cell size) plus the cell that contains the click.
    """
    if prompt.kind == "point":
        radius = prompt.radius if prompt.radius is not None else grid_finest.cell_size
        mask = points_in_region(grid_finest, Sphere(prompt.point, radius))
        own = cell_indices(np.asarray(prompt.point, dtype=np.float64)[None, :],
                           grid_finest.cell_size, grid_finest.origin)
        return mask | points_in_region(grid_finest, CellSet((tuple(own[0].tolist()),)))
    if prompt.kind == "box":
        return points_in_region(grid_finest, Box(prompt.lower, prompt.upper))
    return points_in_region(grid_finest, CellSet(prompt.cells))


def embed_prompt(prompt: PromptInput, grid_finest: NdtGrid, f_finest: FeatureMatrix,
                 params: ParamStore) -> Tensor:
    """Average-pool the prompted finest features and project to a query row."""
    mask = prompt_mask(prompt, grid_finest)
    if not mask.any():
        raise EmptyPromptError("prompt selects no finest-scale cells (empty prompt region)")
    pooled = ad.mean(ad.take_rows(f_finest.values, np.flatnonzero(mask)), axis=0, keepdims=True)
    return linear(pooled, params, "msdec.prompt_proj")


def seg_query(hidden, params: ParamStore, config: PipelineConfig) -> Tensor:
    hidden = ad.as_tensor(hidden)
    if hidden.data.size != config.llm_dim:
        raise ValueError(f"[SEG] hidden state has {hidden.data.size} values, "
                         f"expected {config.llm_dim}")
    return mlp2(ad.reshape(hidden, (1, config.llm_dim)), params, "heads.seg")


# ------------------------------------------------------------ decoding

def cross_attention(x: Tensor, f_r: FeatureMatrix, params: ParamStore, r: int,
                    heads: int) -> Tensor:
    """Attention readout of scale-``r`` features for query rows ``x`` (pre-residual)."""
    p = f"msdec.layer{r}"
    q = linear(layer_norm(x, params, f"{p}.cross_norm"), params, f"{p}.cross.q")
    k = linear(f_r.values, params, f"{p}.key")
    v = linear(f_r.values, params, f"{p}.value")
    return multi_head_attention(q, k, v, params, f"{p}.cross", heads)


def self_attention(x: Tensor, params: ParamStore, r: int, heads: int) -> Tensor:
    p = f"msdec.layer{r}"
    h = layer_norm(x, params, f"{p}.self_norm")
    q = linear(h, params, f"{p}.self.q")
    k = linear(h, params, f"{p}.self.k")
    v = linear(h, params, f"{p}.self.v")
    return multi_head_attention(q, k, v, params, f"{p}.self", heads)


def decoder_layer(q: QuerySet, f_r: FeatureMatrix, params: ParamStore, r: int,
                  heads: int) -> QuerySet:
    """Cross-attention to scale ``r``, then self-attention, then FFN (pre-norm, residual)."""
    if f"msdec.layer{r}.key.weight" not in params:
        raise KeyError(f"no decoder parameters for layer {r}")
    x = q.stacked()
    x = x + cross_attention(x, f_r, params, r, heads)
    x = x + self_attention(x, params, r, heads)
    x = ffn(x, params, f"msdec.layer{r}.ffn")
    return q.restacked(x, r + 1)


def run_msdec(features: Sequence[FeatureMatrix], params: ParamStore, config: PipelineConfig,
              prompt_query: Tensor | None = None, seg: Tensor | None = None) -> QuerySet:
    """Initialize queries from the finest scale and decode coarse to fine."""
    if len(features) != config.scale_count:
        raise ValueError(f"{len(features)} feature scales for {config.scale_count} decoder layers")
    q = init_queries(features[-1], config.query_count, params)
    q = QuerySet(q.base, prompt_query, seg, 0)
    for r, f_r in enumerate(features):
        q = decoder_layer(q, f_r, params, r, config.heads)
    return q


def head_input(rows: Tensor, params: ParamStore) -> Tensor:
    """Heads read the decoded residual stream through one final layer norm."""
    return layer_norm(rows, params, "msdec.final_norm")


def align(q_out: QuerySet, params: ParamStore) -> tuple[Tensor, Tensor | None]:
    scene = mlp2(head_input(q_out.base, params), params, "heads.mm")
    guide = (mlp2(head_input(q_out.prompt, params), params, "heads.mm")
             if q_out.prompt is not None else None)
    return scene, guide


def align_tokens(q_out: QuerySet, params: ParamStore, config: PipelineConfig | None = None,
                 metadata: dict | None = None) -> TokenBundle:
    scene, guide = align(q_out, params)
    meta = {"version": TOKEN_VERSION, "query_count": scene.shape[0]}
    if config is not None:
        meta["scale_config"] = list(config.scales)
    meta.update(metadata or {})
    return TokenBundle(scene.data, None if guide is None else guide.data, meta)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    logits: Tensor          # (N_R,)
    mask: np.ndarray        # (N_R,) bool
    kernel: Tensor          # (1, d_f)
    queries: QuerySet


def mask_logits(kernel: Tensor, f_finest: FeatureMatrix) -> Tensor:
    return ad.reshape(ad.matmul(f_finest.values, ad.transpose(kernel)), (f_finest.rows,))


def decode_segmentation(hidden, features: Sequence[FeatureMatrix], params: ParamStore,
                        config: PipelineConfig, prompt_query: Tensor | None = None
                        ) -> SegmentationResult:
    """Decode a per-cell mask from the [SEG] hidden state.

    The seg query rides through every decoder layer with the base queries;
    the mask head turns its output into a kernel dotted with finest features.
    A cell is on when ``sigmoid(logit) > 0.5`` (strict).
    """
    q_out = run_msdec(features, params, config, prompt_query, seg_query(hidden, params, config))
    kernel = mlp2(head_input(q_out.seg, params), params, "heads.mask")
    logits = mask_logits(kernel, features[-1])
    return SegmentationResult(logits, logits.data > 0.0, kernel, q_out)


def class_logits(q_out: QuerySet, params: ParamStore) -> Tensor:
    """Per-query semantic class scores (instance pre-training head)."""
    return mlp2(head_input(q_out.base, params), params, "heads.cls")


def instance_mask_logits(q_out: QuerySet, f_finest: FeatureMatrix, params: ParamStore) -> Tensor:
    """Per-query mask logits over finest cells, shape ``(M, N_R)``."""
    kernels = mlp2(head_input(q_out.base, params), params, "heads.mask")
    return ad.matmul(kernels, ad.transpose(f_finest.values))


def mask_to_points(cell_mask, grid_finest: NdtGrid, cloud: PointCloud) -> np.ndarray:
    cell_mask = np.asarray(cell_mask).reshape(-1)
    if len(cell_mask) != len(grid_finest):
        raise ValueError(f"cell mask has {len(cell_mask)} entries, grid has {len(grid_finest)} cells")
    if cloud.count != grid_finest.point_count:
        raise ValueError("cloud does not match the grid's point assignment")
    return cell_mask.astype(np.int64)[grid_finest.point_assignment]


# ------------------------------------------------------------ language endpoint

def assemble_llm_input(bundle: TokenBundle, text_tokens: Sequence) -> list[tuple[str, object]]:
    """Scene rows, then the guidance row (if any), then text ids, as ``(kind, value)``."""
    seq: list[tuple[str, object]] = [("scene", row) for row in bundle.scene_tokens]
    if bundle.guidance_token is not None:
        seq.append(("guidance", bundle.guidance_token))
    seq.extend(("text", t) for t in text_tokens)
    return seq


@dataclass(frozen=True)
class EndpointResponse:
    text: str
    seg_hidden: tuple[np.ndarray, ...] = ()


class LanguageEndpoint(Protocol):
    def generate(self, sequence: list[tuple[str, object]]) -> EndpointResponse: ...


class MockEndpoint:
    """Deterministic stand-in for a language model.

    Returns a fixed answer; with ``emit_seg`` the answer contains one
    ``[SEG]`` and a seeded hidden state of width ``llm_dim``.
    """

    def __init__(self, llm_dim: int, emit_seg: bool = False, seed: int = 0,
                 text: str = "The scene contains a floor, walls and furniture."):
        self.llm_dim = llm_dim
        self.emit_seg = emit_seg
        self.seed = seed
        self.text = text
        self.calls = 0

    def seg_hidden(self) -> np.ndarray:
        return param_rng(self.seed, "mock.seg_hidden").standard_normal(self.llm_dim)

    def generate(self, sequence):
        self.calls += 1
        if not self.emit_seg:
            return EndpointResponse(self.text)
        return EndpointResponse(f"Sure, it is {SEG_TOKEN}.", (self.seg_hidden(),))


def respond(bundle: TokenBundle, text_tokens: Sequence, endpoint: LanguageEndpoint,
            segment: Callable[[np.ndarray], SegmentationResult]
            ) -> tuple[EndpointResponse, list[SegmentationResult]]:
    """Query the endpoint and decode one mask per emitted [SEG] token."""
    response = endpoint.generate(assemble_llm_input(bundle, text_tokens))
    n_seg = response.text.count(SEG_TOKEN)
    if n_seg != len(response.seg_hidden):
        raise ValueError("endpoint returned a hidden state count that does not match [SEG] tokens")
    return response, [segment(h) for h in response.seg_hidden]
