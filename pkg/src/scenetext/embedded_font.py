"""Built-in 8x8 bitmap font covering printable ASCII (U+0020..U+007E).

Each glyph is eight row bytes, most significant bit on the left, drawn in
the style of the classic PC text-mode fonts. The table is data, not code:
the rasterizer treats whatever bits are set here as ink, so tests count
bits from this table instead of hard-coding per-glyph totals.
"""

from __future__ import annotations

import numpy as np

# fmt: off
GLYPH_ROWS: dict[int, tuple[int, ...]] = {
    0x20: (0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00),  # space
    0x21: (0x18, 0x3C, 0x3C, 0x18, 0x18, 0x00, 0x18, 0x00),  # !
    0x22: (0x66, 0x66, 0x24, 0x00, 0x00, 0x00, 0x00, 0x00),  # "
    0x23: (0x6C, 0x6C, 0xFE, 0x6C, 0xFE, 0x6C, 0x6C, 0x00),  # #
    0x24: (0x18, 0x3E, 0x60, 0x3C, 0x06, 0x7C, 0x18, 0x00),  # $
    0x25: (0x00, 0xC6, 0xCC, 0x18, 0x30, 0x66, 0xC6, 0x00),  # %
    0x26: (0x38, 0x6C, 0x38, 0x76, 0xDC, 0xCC, 0x76, 0x00),  # &
    0x27: (0x18, 0x18, 0x30, 0x00, 0x00, 0x00, 0x00, 0x00),  # '
    0x28: (0x0C, 0x18, 0x30, 0x30, 0x30, 0x18, 0x0C, 0x00),  # (
    0x29: (0x30, 0x18, 0x0C, 0x0C, 0x0C, 0x18, 0x30, 0x00),  # )
    0x2A: (0x00, 0x66, 0x3C, 0xFF, 0x3C, 0x66, 0x00, 0x00),  # *
    0x2B: (0x00, 0x18, 0x18, 0x7E, 0x18, 0x18, 0x00, 0x00),  # +
    0x2C: (0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x30),  # ,
    0x2D: (0x00, 0x00, 0x00, 0x7E, 0x00, 0x00, 0x00, 0x00),  # -
    0x2E: (0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x00),  # .
    0x2F: (0x06, 0x0C, 0x18, 0x30, 0x60, 0xC0, 0x80, 0x00),  # /
    0x30: (0x7C, 0xC6, 0xCE, 0xD6, 0xE6, 0xC6, 0x7C, 0x00),  # 0
    0x31: (0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00),  # 1
    0x32: (0x3C, 0x66, 0x06, 0x0C, 0x30, 0x60, 0x7E, 0x00),  # 2
    0x33: (0x3C, 0x66, 0x06, 0x1C, 0x06, 0x66, 0x3C, 0x00),  # 3
    0x34: (0x1C, 0x3C, 0x6C, 0xCC, 0xFE, 0x0C, 0x1E, 0x00),  # 4
    0x35: (0x7E, 0x60, 0x7C, 0x06, 0x06, 0x66, 0x3C, 0x00),  # 5
    0x36: (0x1C, 0x30, 0x60, 0x7C, 0x66, 0x66, 0x3C, 0x00),  # 6
    0x37: (0x7E, 0x66, 0x06, 0x0C, 0x18, 0x18, 0x18, 0x00),  # 7
    0x38: (0x3C, 0x66, 0x66, 0x3C, 0x66, 0x66, 0x3C, 0x00),  # 8
    0x39: (0x3C, 0x66, 0x66, 0x3E, 0x06, 0x0C, 0x38, 0x00),  # 9
    0x3A: (0x00, 0x18, 0x18, 0x00, 0x00, 0x18, 0x18, 0x00),  # :
    0x3B: (0x00, 0x18, 0x18, 0x00, 0x00, 0x18, 0x18, 0x30),  # ;
    0x3C: (0x0C, 0x18, 0x30, 0x60, 0x30, 0x18, 0x0C, 0x00),  # <
    0x3D: (0x00, 0x00, 0x7E, 0x00, 0x7E, 0x00, 0x00, 0x00),  # =
    0x3E: (0x30, 0x18, 0x0C, 0x06, 0x0C, 0x18, 0x30, 0x00),  # >
    0x3F: (0x3C, 0x66, 0x06, 0x0C, 0x18, 0x00, 0x18, 0x00),  # ?
    0x40: (0x7C, 0xC6, 0xDE, 0xDE, 0xDE, 0xC0, 0x78, 0x00),  # @
    0x41: (0x18, 0x3C, 0x66, 0x66, 0x7E, 0x66, 0x66, 0x00),  # A
    0x42: (0x7C, 0x66, 0x66, 0x7C, 0x66, 0x66, 0x7C, 0x00),  # B
    0x43: (0x3C, 0x66, 0x60, 0x60, 0x60, 0x66, 0x3C, 0x00),  # C
    0x44: (0x78, 0x6C, 0x66, 0x66, 0x66, 0x6C, 0x78, 0x00),  # D
    0x45: (0x7E, 0x60, 0x60, 0x7C, 0x60, 0x60, 0x7E, 0x00),  # E
    0x46: (0x7E, 0x60, 0x60, 0x7C, 0x60, 0x60, 0x60, 0x00),  # F
    0x47: (0x3C, 0x66, 0x60, 0x6E, 0x66, 0x66, 0x3E, 0x00),  # G
    0x48: (0x66, 0x66, 0x66, 0x7E, 0x66, 0x66, 0x66, 0x00),  # H
    0x49: (0x7E, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00),  # I
    0x4A: (0x1E, 0x0C, 0x0C, 0x0C, 0x0C, 0x6C, 0x38, 0x00),  # J
    0x4B: (0x66, 0x6C, 0x78, 0x70, 0x78, 0x6C, 0x66, 0x00),  # K
    0x4C: (0x60, 0x60, 0x60, 0x60, 0x60, 0x60, 0x7E, 0x00),  # L
    0x4D: (0xC6, 0xEE, 0xFE, 0xD6, 0xC6, 0xC6, 0xC6, 0x00),  # M
    0x4E: (0xC6, 0xE6, 0xF6, 0xDE, 0xCE, 0xC6, 0xC6, 0x00),  # N
    0x4F: (0x3C, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3C, 0x00),  # O
    0x50: (0x7C, 0x66, 0x66, 0x7C, 0x60, 0x60, 0x60, 0x00),  # P
    0x51: (0x3C, 0x66, 0x66, 0x66, 0x66, 0x6C, 0x36, 0x00),  # Q
    0x52: (0x7C, 0x66, 0x66, 0x7C, 0x6C, 0x66, 0x66, 0x00),  # R
    0x53: (0x3C, 0x66, 0x60, 0x3C, 0x06, 0x66, 0x3C, 0x00),  # S
    0x54: (0x7E, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00),  # T
    0x55: (0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3C, 0x00),  # U
    0x56: (0x66, 0x66, 0x66, 0x66, 0x66, 0x3C, 0x18, 0x00),  # V
    0x57: (0xC6, 0xC6, 0xC6, 0xD6, 0xFE, 0xEE, 0xC6, 0x00),  # W
    0x58: (0x66, 0x66, 0x3C, 0x18, 0x3C, 0x66, 0x66, 0x00),  # X
    0x59: (0x66, 0x66, 0x66, 0x3C, 0x18, 0x18, 0x18, 0x00),  # Y
    0x5A: (0x7E, 0x06, 0x0C, 0x18, 0x30, 0x60, 0x7E, 0x00),  # Z
    0x5B: (0x3C, 0x30, 0x30, 0x30, 0x30, 0x30, 0x3C, 0x00),  # [
    0x5C: (0xC0, 0x60, 0x30, 0x18, 0x0C, 0x06, 0x02, 0x00),  # backslash
    0x5D: (0x3C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x3C, 0x00),  # ]
    0x5E: (0x10, 0x38, 0x6C, 0xC6, 0x00, 0x00, 0x00, 0x00),  # ^
    0x5F: (0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xFF),  # _
    0x60: (0x30, 0x18, 0x0C, 0x00, 0x00, 0x00, 0x00, 0x00),  # `
    0x61: (0x00, 0x00, 0x3C, 0x06, 0x3E, 0x66, 0x3E, 0x00),  # a
    0x62: (0x60, 0x60, 0x7C, 0x66, 0x66, 0x66, 0x7C, 0x00),  # b
    0x63: (0x00, 0x00, 0x3C, 0x66, 0x60, 0x66, 0x3C, 0x00),  # c
    0x64: (0x06, 0x06, 0x3E, 0x66, 0x66, 0x66, 0x3E, 0x00),  # d
    0x65: (0x00, 0x00, 0x3C, 0x66, 0x7E, 0x60, 0x3C, 0x00),  # e
    0x66: (0x1C, 0x36, 0x30, 0x78, 0x30, 0x30, 0x30, 0x00),  # f
    0x67: (0x00, 0x00, 0x3E, 0x66, 0x66, 0x3E, 0x06, 0x7C),  # g
    0x68: (0x60, 0x60, 0x7C, 0x66, 0x66, 0x66, 0x66, 0x00),  # h
    0x69: (0x18, 0x00, 0x38, 0x18, 0x18, 0x18, 0x3C, 0x00),  # i
    0x6A: (0x06, 0x00, 0x0E, 0x06, 0x06, 0x06, 0x66, 0x3C),  # j
    0x6B: (0x60, 0x60, 0x66, 0x6C, 0x78, 0x6C, 0x66, 0x00),  # k
    0x6C: (0x38, 0x18, 0x18, 0x18, 0x18, 0x18, 0x3C, 0x00),  # l
    0x6D: (0x00, 0x00, 0xEC, 0xFE, 0xD6, 0xC6, 0xC6, 0x00),  # m
    0x6E: (0x00, 0x00, 0x7C, 0x66, 0x66, 0x66, 0x66, 0x00),  # n
    0x6F: (0x00, 0x00, 0x3C, 0x66, 0x66, 0x66, 0x3C, 0x00),  # o
    0x70: (0x00, 0x00, 0x7C, 0x66, 0x66, 0x7C, 0x60, 0x60),  # p
    0x71: (0x00, 0x00, 0x3E, 0x66, 0x66, 0x3E, 0x06, 0x06),  # q
    0x72: (0x00, 0x00, 0x7C, 0x66, 0x60, 0x60, 0x60, 0x00),  # r
    0x73: (0x00, 0x00, 0x3E, 0x60, 0x3C, 0x06, 0x7C, 0x00),  # s
    0x74: (0x30, 0x30, 0x7C, 0x30, 0x30, 0x36, 0x1C, 0x00),  # t
    0x75: (0x00, 0x00, 0x66, 0x66, 0x66, 0x66, 0x3E, 0x00),  # u
    0x76: (0x00, 0x00, 0x66, 0x66, 0x66, 0x3C, 0x18, 0x00),  # v
    0x77: (0x00, 0x00, 0xC6, 0xC6, 0xD6, 0xFE, 0x6C, 0x00),  # w
    0x78: (0x00, 0x00, 0x66, 0x3C, 0x18, 0x3C, 0x66, 0x00),  # x
    0x79: (0x00, 0x00, 0x66, 0x66, 0x66, 0x3E, 0x0C, 0x78),  # y
    0x7A: (0x00, 0x00, 0x7E, 0x0C, 0x18, 0x30, 0x7E, 0x00),  # z
    0x7B: (0x0E, 0x18, 0x18, 0x70, 0x18, 0x18, 0x0E, 0x00),  # {
    0x7C: (0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00),  # |
    0x7D: (0x70, 0x18, 0x18, 0x0E, 0x18, 0x18, 0x70, 0x00),  # }
    0x7E: (0x76, 0xDC, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00),  # ~
}
# fmt: on

GLYPH_SIZE = 8


def glyph_bitmap(codepoint: int) -> np.ndarray:
    """Return the 8x8 boolean bitmap for one codepoint (True = ink)."""
    rows = GLYPH_ROWS[codepoint]
    out = np.zeros((GLYPH_SIZE, GLYPH_SIZE), dtype=bool)
    for y, row in enumerate(rows):
        for x in range(GLYPH_SIZE):
            out[y, x] = bool(row & (0x80 >> x))
    return out


def ink_bits(codepoint: int) -> int:
    """Number of set bits in one glyph; the rasterizer's per-glyph ink count."""
    return sum(bin(row).count("1") for row in GLYPH_ROWS[codepoint])
