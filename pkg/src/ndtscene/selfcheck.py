"""Gradient and invariant self-test run by ``ndtscene check``."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import losses
from .config import PipelineConfig
from .encoder import FeatureMatrix, encode_scale
from .io import PointCloud
from .msdec import decode_segmentation, decoder_layer, init_queries
from .ndt import build_multiscale, merge_cell_stats
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.gradcheck import finite_diff_check
from .nn.layers import ffn, layer_norm, linear, multi_head_attention, softmax_rows
from .nn.params import ParamStore
from .pipeline import init_params

STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)


def toy_config(config: PipelineConfig) -> PipelineConfig:
    """Shrink a config to gradient-check size while keeping heads and scales."""
    dim = config.heads * max(2, math.ceil(6 / config.heads))
    return replace(config, feature_dim=dim, llm_dim=6, query_count=3,
                   encoder_depth=min(config.encoder_depth, 1), ffn_ratio=2, num_classes=3)


def _toy_cloud(config: PipelineConfig, rng, cells: int = 5, per_cell: int = 6) -> PointCloud:
    """A scene occupying ``cells`` distinct finest-scale cells, several points each."""
    size = config.scales[-1]
    picks = rng.choice(27, cells, replace=False)
    corners = np.stack(np.unravel_index(picks, (3, 3, 3)), axis=1) * size
    inside = rng.uniform(0.1, 0.9, (cells, per_cell, 3)) * size
    return PointCloud((corners[:, None, :] + inside).reshape(-1, 3))


def _subset(params: ParamStore, prefixes) -> dict:
    return {k: params[k] for k in params if any(k.startswith(p) for p in prefixes)}


def _rel(a, b) -> float:
    """Max abs difference relative to the reference's largest magnitude."""
    scale = np.abs(b).max()
    diff = np.abs(np.asarray(a) - np.asarray(b)).max()
    return float(diff / scale) if scale > 0 else float(diff)


def run_checks(config: PipelineConfig) -> list[CheckResult]:
    rng = np.random.default_rng(config.seed)
    toy = toy_config(config)
    params = init_params(toy)
    d, h = toy.feature_dim, toy.heads
    results = []

    def grad(name, fn, inputs, tol, wrt=None):
        results.append(CheckResult(name, finite_diff_check(fn, inputs, STEP, wrt), tol))

    x = rng.standard_normal((4, d))
    single = ParamStore({"lin.weight": rng.standard_normal((d, 3)), "lin.bias": rng.standard_normal(3)})
    grad("grad/linear", lambda t: ad.sum(linear(t["x"], single.bind(t), "lin") * 0.7),
         {"x": x, **single}, 1e-6)
    probe = rng.standard_normal((4, d))
    grad("grad/softmax", lambda t: ad.sum(softmax_rows(t["x"]) * probe), {"x": x}, 1e-6)

    block = "encoder.0.block0" if toy.encoder_depth else None
    ln_params = _subset(params, ["encoder.0.final_norm"])
    grad("grad/layer_norm",
         lambda t: ad.sum(layer_norm(t["x"], params.bind(t), "encoder.0.final_norm") * probe),
         {"x": x, **ln_params}, 1e-4)
    kv = rng.standard_normal((5, d))
    attn_params = _subset(params, ["msdec.layer0.cross.out"])
    grad("grad/attention",
         lambda t: ad.sum(multi_head_attention(t["q"], t["k"], t["v"], params.bind(t),
                                               "msdec.layer0.cross", h) * probe),
         {"q": x, "k": kv, "v": kv * 0.5 + 0.1, **attn_params}, 1e-4)
    ffn_params = _subset(params, ["msdec.layer0.ffn"])
    grad("grad/ffn", lambda t: ad.sum(ffn(t["x"], params.bind(t), "msdec.layer0.ffn") * probe),
         {"x": x, **ffn_params}, 1e-4)

    labels = rng.integers(0, 3, 4)
    target = (rng.random(6) > 0.5).astype(float)
    grad("grad/cross_entropy", lambda t: losses.cross_entropy_cls(t["z"], labels),
         {"z": rng.standard_normal((4, 3))}, 1e-6)
    grad("grad/bce", lambda t: losses.bce_loss(t["z"], target), {"z": rng.standard_normal(6)}, 1e-6)
    grad("grad/dice", lambda t: losses.dice_loss(t["z"], target), {"z": rng.standard_normal(6)}, 1e-4)
    grad("grad/cosine", lambda t: losses.cosine_alignment_loss(t["a"], t["b"]),
         {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}, 1e-4)
    w = config.loss_weights
    grad("grad/stage1",
         lambda t: losses.stage1_loss(t["c"], labels, t["m"], target, [t["f"]], [t["fc"]], w),
         {"c": rng.standard_normal((4, 3)), "m": rng.standard_normal(6),
          "f": rng.standard_normal((3, 4)), "fc": rng.standard_normal((3, 4))}, 1e-4)
    tok_labels = rng.integers(0, 5, 3)
    grad("grad/stage2",
         lambda t: losses.stage2_loss(t["c"], tok_labels, t["m"], target, t["hp"], t["hg"], w),
         {"c": rng.standard_normal((3, 5)), "m": rng.standard_normal(6),
          "hp": rng.standard_normal((2, 4)), "hg": rng.standard_normal((2, 4))}, 1e-4)

    cloud = _toy_cloud(toy, rng)
    ms = build_multiscale(cloud, toy.scales, toy.regularization)
    finest = len(ms.grids) - 1
    enc_params = _subset(params, [f"encoder.{finest}.embed", f"encoder.{finest}.final_norm"]
                         + ([f"encoder.{finest}.block0.attn.q"] if block else []))
    feat_probe = rng.standard_normal((len(ms.finest), d))
    grad("grad/encoder",
         lambda t: ad.sum(encode_scale(ms.finest, params.bind(t), finest, toy).values * feat_probe),
         enc_params, 1e-4)

    with ad.no_grad():
        feats = [encode_scale(g, params, r, toy) for r, g in enumerate(ms.grids)]
    frozen = [FeatureMatrix(Tensor(f.values.data), f.cell_order, f.means) for f in feats]
    seg_target = (rng.random(len(ms.finest)) > 0.5).astype(float)
    seg_params = _subset(params, ["heads.mask", "heads.seg.fc2", f"msdec.layer{finest}.cross.q"])
    grad("grad/segmentation_dice",
         lambda t: losses.dice_loss(
             decode_segmentation(t["hidden"], frozen, params.bind(t), toy).logits, seg_target),
         {"hidden": rng.standard_normal(toy.llm_dim), **seg_params}, 1e-4)

    row_sums = softmax_rows(Tensor(rng.standard_normal((6, 9)) * 10)).data.sum(axis=1)
    results.append(CheckResult("invariant/softmax_row_sum", float(np.abs(row_sums - 1).max()), 1e-12))
    with ad.no_grad():
        q0 = init_queries(frozen[-1], toy.query_count, params)
        perm = rng.permutation(frozen[0].rows)
        a = decoder_layer(q0, frozen[0], params, 0, h).base.data
        b = decoder_layer(q0, frozen[0].permuted(perm), params, 0, h).base.data
    results.append(CheckResult("invariant/kv_permutation", float(np.abs(a - b).max()), 1e-12))
    conservation = max(abs(int(g.counts.sum()) - cloud.count) for g in ms.grids)
    results.append(CheckResult("invariant/conservation", float(conservation), 0.0))

    dyadic = build_multiscale(cloud, [0.4, 0.2])
    coarse, fine = dyadic.grids
    parents = np.floor_divide(fine.indices, 2)
    worst = 0.0
    for j in range(len(coarse)):
        kids = np.flatnonzero(np.all(parents == coarse.indices[j], axis=1))
        merged = merge_cell_stats(fine.cell(k) for k in kids)
        ref = coarse.cell(j)
        worst = max(worst, _rel(merged.mean, ref.mean), _rel(merged.covariance, ref.covariance))
    results.append(CheckResult("invariant/merge_law", float(worst), 1e-9))
    return results
