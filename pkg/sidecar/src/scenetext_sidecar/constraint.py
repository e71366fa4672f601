"""Attention-constraint math applied inside the backbone's layers.

Independent twin of the client-side semantics: a region mask shipped at
canvas resolution is shrunk to each layer's grid with an any-hit rule,
then the attention columns of the constrained token indices are rescaled
by the strength and zeroed outside the region. Rows are not renormalized
afterward; the constrained map feeds the value mix as-is.
"""

from __future__ import annotations

import math

import numpy as np


def shrink_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Any-hit downsample to an h*w grid, returned flat in row-major order.

    A target cell is 1 iff any source pixel in its footprint is nonzero;
    footprints split the source evenly and every cell sees at least one
    pixel, so thin strokes survive coarse layers.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"mask must be non-empty 2-D, got shape {mask.shape}")
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    src_h, src_w = mask.shape
    hit = mask != 0
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        r0 = (i * src_h) // h
        r1 = max(r0 + 1, math.ceil((i + 1) * src_h / h))
        for j in range(w):
            c0 = (j * src_w) // w
            c1 = max(c0 + 1, math.ceil((j + 1) * src_w / w))
            out[i, j] = hit[r0:r1, c0:c1].any()
    return out.reshape(-1)


def rescale_columns(
    weights: np.ndarray,
    mask_vec: np.ndarray,
    token_indices,
    strength: float,
) -> np.ndarray:
    """Replace selected (positions, tokens) columns by strength*col*mask."""
    weights = np.asarray(weights)
    mask_vec = np.asarray(mask_vec, dtype=weights.dtype)
    if weights.ndim != 2:
        raise ValueError(f"attention weights must be 2-D, got shape {weights.shape}")
    if mask_vec.shape != (weights.shape[0],):
        raise ValueError(
            f"mask vector {mask_vec.shape} does not cover {weights.shape[0]} positions"
        )
    idx = sorted(int(i) for i in token_indices)
    if any(i < 0 or i >= weights.shape[1] for i in idx):
        raise ValueError(f"token indices {idx} out of range for {weights.shape[1]} tokens")
    out = weights.copy()
    if idx:
        out[:, idx] = weights.dtype.type(strength) * weights[:, idx] * mask_vec[:, None]
    return out
