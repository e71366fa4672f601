#!/usr/bin/env python3
"""Manual directional comparison against a real backbone. Not CI.

Requires a GPU deployment serving real model weights behind the wire
protocol (this repo's analytic server will run the plumbing but its
numbers mean nothing). For a fixed word set and fixed seeds, generate
once with the full method (attention constraint plus contrastive
image-level prompts) and once with the plain edge-control path
(constraint off, negative scale zero), OCR both over the wire, and
report mean text similarity per path. The claim checked is directional
only: the full method should read back at least as well as the plain
path. Run:

    scenetext-sidecar --host 0.0.0.0 --port 7010 ...   # real weights
    python scripts/directional_check.py --host HOST --port 7010 --out /tmp/dir
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from scenetext import EvalRecord, GuidanceScales, WireClient, mean_norm_edit
from scenetext.config import AppConfig, ConstraintConfig, RemoteSection
from scenetext.pipeline import run_generate

WORDS = ["OPEN", "CLOSED", "SALE", "EXIT", "STOP", "CAFE", "HOTEL", "MENU", "PARK", "TAXI"]


def recognize(client: WireClient, image_path: Path) -> str:
    img = np.asarray(Image.open(image_path).convert("RGB"))
    frame = client.request("ocr", tensors=[("image", img.astype(np.uint8))])
    hits = frame.header.get("recognized", [])
    return hits[0] if hits else ""


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", required=True)
    ap.add_argument("--port", type=int, required=True)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--timeout", type=float, default=600.0)
    args = ap.parse_args()

    with WireClient.connect(args.host, args.port, timeout=args.timeout) as probe:
        caps = probe.capabilities()
        if "ocr" not in caps.get("supports", []):
            print("server does not serve ocr; configure its glyph bank or OCR model",
                  file=sys.stderr)
            return 3
        if caps.get("backbone") == "analytic":
            print("warning: analytic backbone answers; numbers are not meaningful",
                  file=sys.stderr)

    remote = RemoteSection(host=args.host, port=args.port, timeout=args.timeout)
    full_cfg = AppConfig(backend="remote", remote=remote, seed=args.seed)
    # s_neg == s_cfg with s_pos 0 collapses the blend to
    # u + s_cfg*(e_edge - u): plain edge-conditioned CFG, no contrast.
    plain_cfg = dataclasses.replace(
        full_cfg,
        guidance=GuidanceScales(s_cfg=7.5, s_neg=7.5, s_pos=0.0),
        constraint=ConstraintConfig(enabled=False),
    )

    scores = {"full": [], "plain": []}
    out = Path(args.out)
    with WireClient.connect(args.host, args.port, timeout=args.timeout) as client:
        for word in WORDS:
            for name, cfg in (("full", full_cfg), ("plain", plain_cfg)):
                result = run_generate(
                    word, "A sign on the street", cfg, out / name / word.lower()
                )
                read = recognize(client, result.image_path)
                record = EvalRecord.from_pair(word, read)
                scores[name].append(record)
                print(f"{name}\t{word}\t{read!r}\t{record.norm_edit:.3f}")

    full = mean_norm_edit(scores["full"])
    plain = mean_norm_edit(scores["plain"])
    print(f"mean_similarity\tfull={full:.4f}\tplain={plain:.4f}")
    print(f"directional\t{'PASS' if full >= plain else 'FAIL'}")
    return 0 if full >= plain else 1


if __name__ == "__main__":
    sys.exit(main())
