"""Template OCR over bitmap-font sketches.

The recognizer is exact rather than statistical: it assumes the input was
produced by placing fixed-size glyph cells at an integer scale (which is
how the client renders its sketches) and inverts that process. The glyph
bank is the OCR's "model weights": a sheet image plus a JSON manifest
mapping hex codepoints to cell positions, loaded from paths given in the
server config. No bank configured means no OCR capability.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image


class BankError(Exception):
    """Glyph bank files missing or malformed."""


class GlyphBank:
    def __init__(self, glyph_size: tuple[int, int], templates: dict[bytes, str]):
        self.glyph_h, self.glyph_w = glyph_size
        self.templates = templates

    @classmethod
    def load(cls, sheet_path: str | Path, manifest_path: str | Path) -> "GlyphBank":
        try:
            sheet = np.asarray(Image.open(sheet_path).convert("L"))
        except (OSError, ValueError) as e:
            raise BankError(f"cannot read glyph sheet {sheet_path}: {e}") from e
        try:
            manifest = json.loads(Path(manifest_path).read_text("utf-8"))
        except (OSError, ValueError) as e:
            raise BankError(f"cannot read glyph manifest {manifest_path}: {e}") from e
        try:
            gw, gh = (int(v) for v in manifest["glyph_size"])
            entries = dict(manifest["glyphs"])
        except (KeyError, TypeError, ValueError) as e:
            raise BankError(f"manifest needs glyph_size and glyphs: {e}") from e
        if gh < 1 or gw < 1 or not entries:
            raise BankError("glyph bank is empty or has a degenerate cell size")

        templates: dict[bytes, str] = {}
        for key, pos in entries.items():
            try:
                char = chr(int(key, 16))
                x, y = (int(v) for v in pos)
            except (TypeError, ValueError) as e:
                raise BankError(f"bad glyph entry {key!r}: {e}") from e
            if y + gh > sheet.shape[0] or x + gw > sheet.shape[1]:
                raise BankError(f"glyph {key!r} at ({x}, {y}) exceeds the sheet")
            cell = sheet[y : y + gh, x : x + gw] < 128
            if cell.any():  # blank cells would match padding and fake spaces
                templates.setdefault(cell.tobytes(), char)
        if not templates:
            raise BankError("glyph bank has no inked glyphs")
        return cls((gh, gw), templates)

    def recognize(self, image: np.ndarray) -> str | None:
        """Recover the text of a clean glyph-cell rendering, else None."""
        image = np.asarray(image)
        if image.ndim == 3:  # channels may sit first (decoder output) or last (PIL)
            image = image.mean(axis=0 if image.shape[0] == 3 else 2)
        if image.ndim != 2:
            raise ValueError(f"expected a 2-D or 3-channel image, got shape {image.shape}")
        ink = image < 128
        rows = np.nonzero(ink.any(axis=1))[0]
        cols = np.nonzero(ink.any(axis=0))[0]
        if rows.size == 0:
            return ""
        crop = ink[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
        bh, bw = crop.shape

        # The render scale divides both ink-bbox dimensions exactly, so
        # walk candidate scales largest-first and accept the first one
        # whose downsample matches a full row of glyph cells.
        g = math.gcd(bh, bw)
        for s in range(g, 0, -1):
            if g % s:
                continue
            blocks = crop.reshape(bh // s, s, bw // s, s)
            if not (blocks == blocks[:, :1, :, :1]).all():
                continue
            text = self._match_cells(crop[::s, ::s])
            if text is not None:
                return text
        return None

    def _match_cells(self, down: np.ndarray) -> str | None:
        h, w = down.shape
        gh, gw = self.glyph_h, self.glyph_w
        if h > gh:
            return None
        # The ink bbox trims each glyph's blank margins, so recover the
        # cell alignment by trying every top and left offset.
        for pad_top in range(gh - h + 1):
            for pad_left in range(gw):
                total = math.ceil((pad_left + w) / gw) * gw
                grid = np.zeros((gh, total), dtype=bool)
                grid[pad_top : pad_top + h, pad_left : pad_left + w] = down
                chars = []
                for k in range(total // gw):
                    char = self.templates.get(grid[:, k * gw : (k + 1) * gw].tobytes())
                    if char is None:
                        chars = None
                        break
                    chars.append(char)
                if chars:
                    return "".join(chars)
        return None
