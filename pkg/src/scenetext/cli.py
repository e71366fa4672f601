"""Command-line interface.

Subcommands: render, edges, generate, evaluate, attn-dump,
serve-loopback. Exit codes: 0 success, 2 configuration problems
(argparse uses the same code for bad flags), 3 backend or protocol
failures, 4 evaluation mismatches.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .attention import ConstraintConfig
from .config import AppConfig, BACKENDS, load_config, load_wordlist
from .errors import BackendError, ConfigError, EvalError, SceneTextError
from .guidance import GuidanceScales
from .raster import BBox


def _parse_bbox(spec: str) -> BBox:
    try:
        x, y, w, h = (int(p) for p in spec.split(","))
    except ValueError:
        raise ConfigError(f"bbox must be 'x,y,w,h', got {spec!r}") from None
    return BBox(x, y, w, h)


def _parse_canvas(spec: str) -> tuple[int, int]:
    try:
        w, h = (int(p) for p in spec.lower().split("x"))
    except ValueError:
        raise ConfigError(f"canvas must be 'WxH', got {spec!r}") from None
    return (w, h)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (default 2345)")
    p.add_argument("--canvas", help="canvas size as WxH (default 512x512)")
    p.add_argument("--font", choices=["embedded", "atlas", "random"], help="glyph source")
    p.add_argument("--atlas-image", help="atlas sheet (PNG/PGM) when --font atlas")
    p.add_argument("--atlas-manifest", help="atlas manifest JSON (default: sheet with .json)")
    p.add_argument("--low", type=float, help="edge detector low threshold")
    p.add_argument("--high", type=float, help="edge detector high threshold")
    p.add_argument("--sigma", type=float, help="edge detector blur sigma")


def _generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("text", help="text to place into the scene")
    p.add_argument("--prompt", default="A sign on the street", help="scene prompt")
    p.add_argument("--bbox", help="text region as x,y,w,h (default: seeded placement)")
    p.add_argument("--backend", choices=list(BACKENDS), help="denoiser backend")
    p.add_argument("--steps", type=int, help="inference steps (default 50)")
    p.add_argument("--s-cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--s-neg", type=float, help="contrastive image-prompt scale")
    p.add_argument("--s-pos", type=float, help="positive image-prompt mix")
    p.add_argument("--lambda", dest="strength", type=float,
                   help="attention constraint strength")
    p.add_argument("--no-constraint", action="store_true",
                   help="disable the localized attention constraint")
    p.add_argument("--wordlist-file", help="replacement wordlist, one word per line")
    p.add_argument("--host", help="remote backend host")
    p.add_argument("--port", type=int, help="remote backend port")
    p.add_argument("--timeout", type=float, help="remote request timeout in seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="scenetext",
        description="Training-free scene-text image generation toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a text sketch, its edges, and region mask")
    p.add_argument("text", help="text to rasterize")
    p.add_argument("--bbox", help="text region as x,y,w,h")
    _common_flags(p)

    p = sub.add_parser("edges", help="detect edges in a grayscale image")
    p.add_argument("input", help="source image (PNG or PGM)")
    p.add_argument("output", help="edge map to write (PNG or PGM)")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--low", type=float, help="low threshold (default 100)")
    p.add_argument("--high", type=float, help="high threshold (default 200)")
    p.add_argument("--sigma", type=float, help="blur sigma (default 1.4)")

    p = sub.add_parser("generate", help="run the full guided generation pipeline")
    _generation_flags(p)
    _common_flags(p)
    p.add_argument("--dump-latents", action="store_true",
                   help="write per-step latents for debugging")

    p = sub.add_parser("evaluate", help="score recognized text against ground truth")
    p.add_argument("--manifest", required=True,
                   help="JSONL with image, ground_truth, optional lang")
    p.add_argument("--recognized",
                   help="JSONL with image, recognized; omit to OCR via --host/--port")
    p.add_argument("--host", help="remote OCR host")
    p.add_argument("--port", type=int, help="remote OCR port")
    p.add_argument("--timeout", type=float, help="remote request timeout in seconds")
    p.add_argument("--no-figure", action="store_true", help="skip the metrics chart")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attn-dump", help="dump averaged attention heatmaps per token")
    _generation_flags(p)
    _common_flags(p)

    p = sub.add_parser("serve-loopback", help="run the reference loopback server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--mode", choices=["echo", "zero"], default="echo")
    p.add_argument("--latent-shape", default="3x64x64", help="CxHxW accepted by the server")

    return ap


def _apply_flags(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    """Overlay CLI flags onto the loaded config."""
    raster = cfg.raster
    if getattr(args, "canvas", None):
        raster = dataclasses.replace(raster, canvas=_parse_canvas(args.canvas))
    if getattr(args, "font", None):
        raster = dataclasses.replace(raster, font=args.font)
    if getattr(args, "atlas_image", None):
        raster = dataclasses.replace(raster, font="atlas", atlas_image=args.atlas_image)
    if getattr(args, "atlas_manifest", None):
        raster = dataclasses.replace(raster, atlas_manifest=args.atlas_manifest)

    edges = cfg.edges
    for flag in ("low", "high", "sigma"):
        if getattr(args, flag, None) is not None:
            edges = dataclasses.replace(edges, **{flag: getattr(args, flag)})

    guidance = cfg.guidance
    for flag, name in (("s_cfg", "s_cfg"), ("s_neg", "s_neg"), ("s_pos", "s_pos")):
        if getattr(args, flag, None) is not None:
            guidance = dataclasses.replace(guidance, **{name: getattr(args, flag)})

    constraint = cfg.constraint
    if getattr(args, "wordlist_file", None):
        constraint = dataclasses.replace(constraint, wordlist=load_wordlist(args.wordlist_file))
    if getattr(args, "strength", None) is not None:
        constraint = dataclasses.replace(constraint, strength=args.strength)
    if getattr(args, "no_constraint", False):
        constraint = ConstraintConfig(
            wordlist=constraint.wordlist, strength=constraint.strength, enabled=False
        )

    sampler = cfg.sampler
    if getattr(args, "steps", None) is not None:
        sampler = dataclasses.replace(sampler, steps=args.steps)

    remote = cfg.remote
    for flag in ("host", "port", "timeout"):
        if getattr(args, flag, None) is not None:
            remote = dataclasses.replace(remote, **{flag: getattr(args, flag)})

    return dataclasses.replace(
        cfg,
        raster=raster,
        edges=edges,
        guidance=guidance,
        constraint=constraint,
        sampler=sampler,
        remote=remote,
        seed=args.seed if getattr(args, "seed", None) is not None else cfg.seed,
        backend=args.backend if getattr(args, "backend", None) else cfg.backend,
    )


def _cmd_render(args) -> int:
    from . import pipeline

    cfg = _apply_flags(load_config(args.config), args)
    bbox = _parse_bbox(args.bbox) if args.bbox else None
    result = pipeline.run_render(args.text, cfg, args.out, bbox=bbox)
    print(f"bbox\t{','.join(map(str, result.bbox.as_tuple()))}")
    for name in ("sketch_path", "edge_path", "mask_path"):
        print(f"{name.removesuffix('_path')}\t{getattr(result, name)}")
    return 0


def _cmd_edges(args) -> int:
    from . import imgio
    from .edges import canny

    cfg = load_config(args.config).edges
    img = imgio.load_gray(args.input)
    edge = canny(
        img,
        cfg.low if args.low is None else args.low,
        cfg.high if args.high is None else args.high,
        cfg.sigma if args.sigma is None else args.sigma,
    )
    imgio.save_binary(args.output, edge)
    print(f"edges\t{args.output}\t{int(edge.sum())}")
    return 0


def _cmd_generate(args) -> int:
    from . import pipeline

    cfg = _apply_flags(load_config(args.config), args)
    bbox = _parse_bbox(args.bbox) if args.bbox else None
    result = pipeline.run_generate(
        args.text, args.prompt, cfg, args.out,
        bbox=bbox, dump_latents=args.dump_latents,
    )
    print(f"image\t{result.image_path}")
    print(f"metadata\t{result.out_dir / 'metadata.json'}")
    print(f"bbox\t{','.join(map(str, result.bbox.as_tuple()))}")
    return 0


def _cmd_evaluate(args) -> int:
    from . import pipeline
    from .wire import WireClient

    client = None
    if args.recognized is None and args.host:
        client = WireClient.connect(args.host, args.port or 8747,
                                    args.timeout or 120.0)
    try:
        metrics = pipeline.run_evaluate(
            args.manifest,
            args.out,
            recognized_path=args.recognized,
            client=client,
            figure=not args.no_figure,
        )
    finally:
        if client is not None:
            client.close()
    for lang in sorted(metrics):
        m = metrics[lang]
        print(f"{lang}\taccuracy={m['accuracy']:.2f}\tedit_accuracy={m['edit_accuracy']:.2f}\tn={m['n']}")
    print(f"metrics\t{Path(args.out) / 'metrics.json'}")
    return 0


def _cmd_attn_dump(args) -> int:
    from . import pipeline

    cfg = _apply_flags(load_config(args.config), args)
    bbox = _parse_bbox(args.bbox) if args.bbox else None
    index = pipeline.run_attn_dump(args.text, args.prompt, cfg, args.out, bbox=bbox)
    for entry in index["maps"]:
        print(f"map\t{entry['token']}\t{entry['word']}\t{entry['file']}")
    print(f"index\t{Path(args.out) / 'attention.json'}")
    return 0


def _cmd_serve_loopback(args) -> int:
    from .loopback import LoopbackServer

    try:
        shape = tuple(int(p) for p in args.latent_shape.lower().split("x"))
    except ValueError:
        raise ConfigError(f"latent shape must be CxHxW, got {args.latent_shape!r}") from None
    if len(shape) != 3:
        raise ConfigError(f"latent shape must have three dims, got {args.latent_shape!r}")
    server = LoopbackServer(args.host, args.port, mode=args.mode, latent_shape=shape)
    print(f"listening\t{server.host}:{server.port}", flush=True)
    server.serve_forever()
    return 0


_COMMANDS = {
    "render": _cmd_render,
    "edges": _cmd_edges,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "attn-dump": _cmd_attn_dump,
    "serve-loopback": _cmd_serve_loopback,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EvalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except BackendError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except SceneTextError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
