"""Glyph rasterization and region geometry.

Renders target text as a black-on-white sketch inside a bounding box,
places boxes on the canvas, and derives the binary region mask plus the
positive/negative image-prompt edge conditions used by the guidance stack.

Conventions: canvases are (width, height) tuples, arrays are (rows, cols).
Sketches are uint8 with ink 0 on background 255; masks and edge maps are
uint8 with values in {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import embedded_font
from .errors import ConfigError, LayoutError, UnsupportedCodepointError

BACKGROUND = 255
INK = 0

# Fraction of the bbox reserved as padding on each side before fitting text.
INNER_PAD = 0.1
# Minimum distance from any placed bbox to the canvas border, in pixels.
PLACEMENT_MARGIN = 16
# Aspect ratio used to size a placed bbox: width ~ height * chars * this.
CHAR_WIDTH_RATIO = 0.6


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates; (x, y) is the top-left corner."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ConfigError(f"bbox must have positive size, got {self.w}x{self.h}")

    def validate(self, canvas: tuple[int, int]) -> "BBox":
        cw, ch = canvas
        if self.x < 0 or self.y < 0 or self.x + self.w > cw or self.y + self.h > ch:
            raise ConfigError(
                f"bbox ({self.x},{self.y},{self.w},{self.h}) exceeds canvas {cw}x{ch}"
            )
        return self

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Glyph:
    bitmap: np.ndarray  # bool, (rows, cols)
    advance: int


@dataclass(frozen=True)
class GlyphAtlas:
    glyphs: dict[int, Glyph]
    line_height: int
    source: str

    def lookup(self, text: str) -> list[Glyph]:
        missing = [ord(c) for c in text if ord(c) not in self.glyphs]
        if missing:
            raise UnsupportedCodepointError(missing)
        return [self.glyphs[ord(c)] for c in text]


_EMBEDDED: GlyphAtlas | None = None


def embedded_atlas() -> GlyphAtlas:
    """Atlas built from the compiled-in 8x8 ASCII font."""
    global _EMBEDDED
    if _EMBEDDED is None:
        glyphs = {
            cp: Glyph(embedded_font.glyph_bitmap(cp), embedded_font.GLYPH_SIZE)
            for cp in embedded_font.GLYPH_ROWS
        }
        _EMBEDDED = GlyphAtlas(glyphs, embedded_font.GLYPH_SIZE, "embedded")
    return _EMBEDDED


def load_atlas(image_path: str | Path, manifest_path: str | Path | None = None) -> GlyphAtlas:
    """Load a glyph atlas from a PNG/PGM sheet plus a JSON manifest.

    The manifest maps hex codepoint strings to {x, y, w, h, advance} boxes
    on the sheet and carries a top-level "line_height". Pixels darker than
    128 on the sheet count as ink.
    """
    image_path = Path(image_path)
    if manifest_path is None:
        manifest_path = image_path.with_suffix(".json")
    try:
        sheet = np.asarray(Image.open(image_path).convert("L"))
    except OSError as e:
        raise ConfigError(f"cannot read atlas image {image_path}: {e}") from e
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read atlas manifest {manifest_path}: {e}") from e
    if "line_height" not in manifest:
        raise ConfigError(f"atlas manifest {manifest_path} lacks line_height")
    line_height = int(manifest["line_height"])
    if line_height <= 0:
        raise ConfigError("atlas line_height must be positive")

    glyphs: dict[int, Glyph] = {}
    for key, box in manifest.items():
        if key == "line_height":
            continue
        try:
            cp = int(key, 16)
        except ValueError as e:
            raise ConfigError(f"bad codepoint key {key!r} in atlas manifest") from e
        x, y, w, h = (int(box[k]) for k in ("x", "y", "w", "h"))
        advance = int(box.get("advance", w))
        if w <= 0 or h <= 0 or h > line_height or advance <= 0:
            raise ConfigError(f"bad glyph box for {key!r}")
        if y + h > sheet.shape[0] or x + w > sheet.shape[1]:
            raise ConfigError(f"glyph box for {key!r} exceeds atlas sheet")
        glyphs[cp] = Glyph(sheet[y : y + h, x : x + w] < 128, advance)
    if not glyphs:
        raise ConfigError(f"atlas manifest {manifest_path} defines no glyphs")
    return GlyphAtlas(glyphs, line_height, str(image_path))


def render_sketch(
    text: str,
    atlas: GlyphAtlas,
    bbox: BBox,
    canvas: tuple[int, int],
) -> np.ndarray:
    """Render text centered in the bbox on a white canvas.

    Glyph bitmaps are scaled by a uniform integer factor, the largest that
    fits after reserving 10% padding on each side of the box. Raises
    LayoutError when even 1x does not fit.
    """
    cw, ch = canvas
    bbox.validate(canvas)
    img = np.full((ch, cw), BACKGROUND, dtype=np.uint8)
    if not text:
        return img
    glyphs = atlas.lookup(text)

    native_w = sum(g.advance for g in glyphs)
    native_h = atlas.line_height
    inner_w = bbox.w - 2 * round(bbox.w * INNER_PAD)
    inner_h = bbox.h - 2 * round(bbox.h * INNER_PAD)
    if native_w <= 0 or inner_w <= 0 or inner_h <= 0:
        raise LayoutError(f"bbox {bbox.w}x{bbox.h} too small for any text")
    scale = min(inner_w // native_w, inner_h // native_h)
    if scale < 1:
        raise LayoutError(
            f"text {text!r} needs {native_w}x{native_h} px at 1x but only "
            f"{inner_w}x{inner_h} px fit inside bbox {bbox.w}x{bbox.h}"
        )

    text_w = native_w * scale
    text_h = native_h * scale
    x0 = bbox.x + (bbox.w - text_w) // 2
    y0 = bbox.y + (bbox.h - text_h) // 2
    cursor = x0
    for g in glyphs:
        up = np.kron(g.bitmap, np.ones((scale, scale), dtype=bool))
        gh, gw = up.shape
        img[y0 : y0 + gh, cursor : cursor + gw][up] = INK
        cursor += g.advance * scale
    return img


def place_bbox(
    text_len: int,
    canvas: tuple[int, int],
    seed: int,
    user_bbox: BBox | None = None,
) -> BBox:
    """Pick a bbox for the text, or validate a caller-supplied one.

    Random placement keeps a 16 px margin from every border and draws the
    box height between 1/8 and 1/3 of the canvas height. Deterministic for
    a fixed (text_len, canvas, seed).
    """
    cw, ch = canvas
    if cw < 64 or ch < 64:
        raise ConfigError(f"canvas {cw}x{ch} too small, need at least 64x64")
    if user_bbox is not None:
        return user_bbox.validate(canvas)
    if text_len < 0:
        raise ConfigError("text_len must be non-negative")

    rng = np.random.default_rng(seed)
    bh = int(rng.integers(ch // 8, ch // 3 + 1))
    bw = int(min(max(round(bh * text_len * CHAR_WIDTH_RATIO), bh), cw - 2 * PLACEMENT_MARGIN))
    x = int(rng.integers(PLACEMENT_MARGIN, cw - PLACEMENT_MARGIN - bw + 1))
    y = int(rng.integers(PLACEMENT_MARGIN, ch - PLACEMENT_MARGIN - bh + 1))
    return BBox(x, y, bw, bh)


def make_region_mask(bbox: BBox, canvas: tuple[int, int]) -> np.ndarray:
    """Binary mask, 1 inside the bbox (inclusive of its border), else 0."""
    cw, ch = canvas
    bbox.validate(canvas)
    mask = np.zeros((ch, cw), dtype=np.uint8)
    mask[bbox.y : bbox.y + bbox.h, bbox.x : bbox.x + bbox.w] = 1
    return mask


def bbox_perimeter(bbox: BBox, canvas: tuple[int, int]) -> np.ndarray:
    """Binary map of the one-pixel bbox outline."""
    cw, ch = canvas
    bbox.validate(canvas)
    out = np.zeros((ch, cw), dtype=np.uint8)
    x1 = bbox.x + bbox.w - 1
    y1 = bbox.y + bbox.h - 1
    out[bbox.y, bbox.x : x1 + 1] = 1
    out[y1, bbox.x : x1 + 1] = 1
    out[bbox.y : y1 + 1, bbox.x] = 1
    out[bbox.y : y1 + 1, x1] = 1
    return out


def make_pip_edge(edge: np.ndarray, bbox: BBox) -> np.ndarray:
    """Positive image prompt: the edge map plus the bbox outline.

    Drawing an explicit frame around the text region strengthens the pull
    toward a sign-like structure there (the negative counterpart is an
    empty edge map, see make_nip_edge).
    """
    if edge.ndim != 2:
        raise ConfigError(f"edge map must be 2-D, got shape {edge.shape}")
    h, w = edge.shape
    out = edge.astype(np.uint8, copy=True)
    np.maximum(out, bbox_perimeter(bbox, (w, h)), out=out)
    return out


def make_nip_edge(canvas: tuple[int, int]) -> np.ndarray:
    """Negative image prompt: an all-zero edge map (no structure anywhere)."""
    cw, ch = canvas
    if cw <= 0 or ch <= 0:
        raise ConfigError(f"canvas must be positive, got {cw}x{ch}")
    return np.zeros((ch, cw), dtype=np.uint8)
