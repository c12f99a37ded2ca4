"""Command-line entry point.

Exit codes: 0 success, 1 validation or input error, 2 NaN/Inf detected.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig, load_config
from .errors import NonFiniteError
from .msdec import MockEndpoint, PromptInput, decode_segmentation, mask_to_points, respond
from .nn import autodiff as ad
from .nn.params import ParamStore
from .pipeline import (DOWNSAMPLE_COLUMNS, check_params, compare_downsample, init_params,
                       scene_stats, tokenize_cloud)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("ndtscene")


def parse_prompt(text: str) -> PromptInput:
    """``point:x,y,z[,r]``, ``box:x0,y0,z0,x1,y1,z1`` or ``mask:i,j,k;i,j,k``."""
    kind, _, body = text.partition(":")
    try:
        if kind == "point":
            v = [float(s) for s in body.split(",")]
            if len(v) not in (3, 4):
                raise ValueError
            return PromptInput("point", point=tuple(v[:3]), radius=v[3] if len(v) == 4 else None)
        if kind == "box":
            v = [float(s) for s in body.split(",")]
            if len(v) != 6:
                raise ValueError
            return PromptInput("box", lower=tuple(v[:3]), upper=tuple(v[3:]))
        if kind == "mask":
            cells = tuple(tuple(int(s) for s in c.split(",")) for c in body.split(";") if c)
            if any(len(c) != 3 for c in cells):
                raise ValueError
            return PromptInput("mask", cells=cells)
    except ValueError:
        pass
    raise ValueError(f"cannot parse prompt {text!r}; expected point:x,y,z[,r], "
                     "box:x0,y0,z0,x1,y1,z1 or mask:i,j,k;...")


def _config(args) -> PipelineConfig:
    return load_config(args.config).with_overrides(seed=args.seed)


def _params(args, config: PipelineConfig) -> ParamStore:
    if getattr(args, "weights", None):
        params = ParamStore.load(args.weights)
        check_params(params, config)
        return params
    return init_params(config)


def _views(args):
    return io.load_camera_rig(args.rig) if getattr(args, "rig", None) else None


def _prompt(args):
    return parse_prompt(args.prompt) if getattr(args, "prompt", None) else None


# ------------------------------------------------------------ commands

def cmd_tokenize(args) -> int:
    config = _config(args)
    cloud = io.load_point_cloud(args.cloud)
    params = _params(args, config)
    result = tokenize_cloud(cloud, config, params, _views(args), _prompt(args), args.threads)
    io.write_tokens(result.bundle, args.out)
    for r, grid in enumerate(result.encoding.multiscale.grids):
        print(f"scale {r} (cell {grid.cell_size:g} m): {len(grid)} cells")
    finest = len(result.encoding.multiscale.finest)
    print(f"compression N_R/N_p: {finest}/{cloud.count} = {finest / cloud.count:.6g}")
    print(f"scene tokens: {result.bundle.token_count}"
          + (" (+1 guidance)" if result.bundle.guidance_token is not None else ""))
    return EXIT_OK


def _seg_hidden(args, config: PipelineConfig, bundle, segment):
    if args.seg_source == "mock":
        endpoint = MockEndpoint(config.llm_dim, emit_seg=True, seed=config.seed)
        _, segs = respond(bundle, [], endpoint, segment)
        return segs[0]
    path = Path(args.seg_source)
    hidden = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
    return segment(np.asarray(hidden, dtype=np.float64).reshape(-1))


def cmd_segment(args) -> int:
    config = _config(args)
    cloud = io.load_point_cloud(args.cloud)
    params = _params(args, config)
    tok = tokenize_cloud(cloud, config, params, _views(args), _prompt(args), args.threads)
    enc = tok.encoding

    def segment(hidden):
        with ad.no_grad():
            return decode_segmentation(hidden, enc.features, params, config, enc.prompt_query)

    seg = _seg_hidden(args, config, tok.bundle, segment)
    points = mask_to_points(seg.mask, enc.multiscale.finest, cloud)
    io.write_point_mask(points, args.out, cloud.count)
    logits = seg.logits.data
    on = int(points.sum())
    print(f"cells on: {int(seg.mask.sum())}/{len(seg.mask)}")
    print(f"points on: {on}, off: {cloud.count - on}")
    print(f"cell logits: min {logits.min():.6g} mean {logits.mean():.6g} max {logits.max():.6g}")
    return EXIT_OK


def cmd_compare_downsample(args) -> int:
    rows = compare_downsample(io.load_point_cloud(args.cloud), _config(args))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=DOWNSAMPLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = scene_stats(io.load_point_cloud(args.cloud), _config(args), args.threads)
    print(f"N_p: {stats['points']}")
    print(f"color: {'present' if stats['has_color'] else 'absent'}")
    print(f"raw bytes (f32): {stats['raw_bytes']}")
    print(f"{'scale':>5} {'cell_m':>8} {'cells':>9} {'min':>6} {'mean':>9} {'max':>7} {'bytes':>10}")
    for s in stats["scales"]:
        print(f"{s['scale']:>5} {s['cell_size']:>8g} {s['cells']:>9} {s['min_points']:>6} "
              f"{s['mean_points']:>9.2f} {s['max_points']:>7} {s['descriptor_bytes']:>10}")
    if args.out:
        Path(args.out).write_text(json.dumps(stats, indent=2) + "\n")
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_checks

    results = run_checks(_config(args))
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<28} {r.value:.3e} (tol {r.tolerance:.0e})")
    grads = [r.value for r in results if r.name.startswith("grad/")]
    print(f"max gradient relative error: {max(grads):.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_INVALID
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    from .synthetic import render_views, synthetic_room

    config = _config(args)
    cloud = synthetic_room(args.points, seed=config.seed)
    io.write_point_cloud(cloud, args.out, binary=not args.ascii)
    print(f"wrote {cloud.count} points to {args.out}")
    if args.rig:
        eyes = [(0.5, 0.5, 2.5), (5.5, 0.5, 2.5), (5.5, 4.5, 2.5), (0.5, 4.5, 2.5)]
        views = render_views(cloud, eyes[:args.views], target=(3.0, 2.5, 0.8))
        io.save_camera_rig(views, args.rig)
        print(f"wrote {len(views)} views to {args.rig}")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    config = _config(args)
    init_params(config).save(args.out)
    print(f"wrote seed-{config.seed} weights to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults apply otherwise)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")

    parser = argparse.ArgumentParser(
        prog="ndtscene", description="Multi-scale NDT scene tokenizer and mask decoder.",
        epilog="exit codes: 0 ok, 1 invalid input or config, 2 NaN/Inf detected")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--out", required=out_required)
        p.set_defaults(func=func)
        return p

    p = add("tokenize", cmd_tokenize, "turn a cloud into scene tokens")
    p.add_argument("cloud")
    p.add_argument("--rig", help="camera rig JSON for colorization")
    p.add_argument("--weights", help="checkpoint (seeded init otherwise)")
    p.add_argument("--prompt", help="point:x,y,z[,r] | box:x0,y0,z0,x1,y1,z1 | mask:i,j,k;...")

    p = add("segment", cmd_segment, "decode a per-point mask")
    p.add_argument("cloud")
    p.add_argument("--rig")
    p.add_argument("--weights")
    p.add_argument("--prompt")
    p.add_argument("--seg-source", default="mock",
                   help="'mock' or a .npy/.txt file holding the [SEG] hidden state")

    p = add("compare-downsample", cmd_compare_downsample, "NDT vs centroid baseline (CSV)",
            out_required=False)
    p.add_argument("cloud")

    p = add("stats", cmd_stats, "per-scale occupancy table", out_required=False)
    p.add_argument("cloud")

    add("check", cmd_check, "gradient and invariant self-test", out_required=False)

    p = add("gen-scene", cmd_gen_scene, "write a seeded synthetic room")
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--rig", help="also render views and write a rig JSON here")
    p.add_argument("--views", type=int, default=4, choices=range(1, 5))
    p.add_argument("--ascii", action="store_true", help="ASCII PLY instead of binary")

    add("init-weights", cmd_init_weights, "write seeded initial weights")
    return parser


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "ndtscene"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("ndtscene"):
            name = mod
    return name


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("ndtscene: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"ndtscene {args.command}: numeric error in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"ndtscene {args.command}: error in {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
