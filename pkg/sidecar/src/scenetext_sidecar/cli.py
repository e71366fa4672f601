"""Entry point: stand up the denoiser service and block until shutdown."""

from __future__ import annotations

import argparse
import sys

from .ocr import BankError
from .server import SidecarConfig, SidecarServer


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scenetext-sidecar",
        description="Serve the denoiser wire protocol around the analytic backbone",
    )
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="0 picks a free port")
    p.add_argument("--device", default="cpu", help="recorded in capabilities")
    p.add_argument("--backbone-seed", type=int, default=2026)
    p.add_argument("--canvas", default="512x512", help="default canvas as WxH")
    p.add_argument("--ocr-sheet", default=None, help="glyph sheet image enabling the ocr op")
    p.add_argument("--ocr-manifest", default=None, help="glyph manifest JSON")
    p.add_argument("--debug", action="store_true",
                   help="serve the attention/selector introspection ops")
    return p


def _parse_canvas(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise SystemExit(f"bad canvas {text!r}, expected WxH")
    if w < 1 or h < 1:
        raise SystemExit(f"canvas {text!r} must be positive")
    return w, h


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = SidecarConfig(
        host=args.host,
        port=args.port,
        device=args.device,
        backbone_seed=args.backbone_seed,
        default_canvas=_parse_canvas(args.canvas),
        ocr_sheet=args.ocr_sheet,
        ocr_manifest=args.ocr_manifest,
        debug=args.debug,
    )
    try:
        server = SidecarServer(config)
    except (BankError, OSError) as e:
        print(f"error\t{e}", file=sys.stderr)
        return 3
    print(f"listening\t{server.host}:{server.port}", flush=True)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
