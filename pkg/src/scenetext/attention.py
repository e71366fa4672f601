"""Cross-attention with a localized spatial constraint on chosen tokens.

The mechanism: pick the prompt tokens naming the text carrier (from a
wordlist such as "sign" or "billboard"), then for those token columns
scale the attention map by a constant and zero it outside the text region
mask. Columns of all other tokens are left untouched and no
renormalization happens afterwards, so the constrained columns are free
to dominate inside the region and vanish outside it.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_WORDLIST: tuple[str, ...] = (
    "sign",
    "billboard",
    "label",
    "promotions",
    "notice",
    "marquee",
    "board",
    "blackboard",
    "slogan",
    "whiteboard",
    "logo",
)

DEFAULT_STRENGTH = 6.0


@dataclass(frozen=True)
class AttentionDirective:
    """Instruction to constrain attention toward a region.

    mask is the full-resolution {0,1} text-region mask; token_indices are
    the prompt token positions to constrain; strength is the scale applied
    inside the region. The branch flags say which parts of a two-branch
    backbone (base denoiser / edge-control adapter) apply the constraint.
    """

    mask: np.ndarray
    token_indices: frozenset[int]
    strength: float = DEFAULT_STRENGTH
    apply_to_base: bool = True
    apply_to_control: bool = True

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.uint8)
        if mask.ndim != 2:
            raise ConfigError(f"directive mask must be 2-D, got shape {mask.shape}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "token_indices", frozenset(int(i) for i in self.token_indices))
        if any(i < 0 for i in self.token_indices):
            raise ConfigError("token indices must be non-negative")
        if not (self.strength > 0):
            raise ConfigError(f"constraint strength must be positive, got {self.strength}")
        if self.token_indices and not (self.apply_to_base or self.apply_to_control):
            raise ConfigError("directive constrains tokens but applies to no branch")


@dataclass(frozen=True)
class ConstraintConfig:
    """User-facing knobs for the attention constraint."""

    wordlist: tuple[str, ...] = DEFAULT_WORDLIST
    strength: float = DEFAULT_STRENGTH
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "wordlist", tuple(self.wordlist))
        if self.enabled and not self.wordlist:
            raise ConfigError("constraint enabled but wordlist is empty")
        if not (self.strength > 0):
            raise ConfigError(f"constraint strength must be positive, got {self.strength}")


@dataclass
class AttentionRecord:
    """One layer's attention map at one diffusion step (row-major positions)."""

    layer: str
    timestep: int
    h: int
    w: int
    values: np.ndarray  # (h * w, token_count)


def tokenize(prompt: str) -> list[str]:
    """Whitespace tokenization; the built-in stand-in for a model tokenizer."""
    return prompt.split()


def _normalize(token: str) -> str:
    return token.strip(string.punctuation).lower()


def match_wordlist(prompt: str, wordlist) -> tuple[list[str], frozenset[int]]:
    """Tokenize the prompt and return indices of tokens found in the wordlist.

    Matching ignores case and surrounding punctuation, so "sign," in the
    prompt matches "sign" in the list.
    """
    words = {w.lower() for w in wordlist}
    tokens = tokenize(prompt)
    hits = frozenset(i for i, t in enumerate(tokens) if _normalize(t) in words)
    return tokens, hits


def constrain_map(
    amap: np.ndarray,
    mask: np.ndarray,
    token_indices,
    strength: float,
) -> np.ndarray:
    """Scale-and-mask the chosen token columns of an attention map.

    amap is (positions, tokens); mask is a {0,1} vector over positions.
    For each index i in token_indices the column becomes
    strength * column * mask. Other columns are returned bit-identical,
    and rows are deliberately not renormalized.
    """
    amap = np.asarray(amap)
    if amap.ndim != 2:
        raise ConfigError(f"attention map must be 2-D, got shape {amap.shape}")
    n, d_t = amap.shape
    mask = np.asarray(mask).reshape(-1)
    if mask.shape[0] != n:
        raise ConfigError(f"mask has {mask.shape[0]} entries for {n} positions")
    indices = sorted({int(i) for i in token_indices})
    if indices and (indices[0] < 0 or indices[-1] >= d_t):
        raise ConfigError(f"token index out of range for {d_t} tokens: {indices}")
    if not (strength > 0):
        raise ConfigError(f"constraint strength must be positive, got {strength}")
    out = amap.copy()
    scaled_mask = mask.astype(amap.dtype, copy=False)
    for i in indices:
        out[:, i] = strength * amap[:, i] * scaled_mask
    return out


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Downsample a binary mask to an h*w attention layer, any-hit rule.

    A target cell is 1 iff any source pixel inside its footprint is
    nonzero, which keeps thin regions alive at coarse resolutions. Returns
    a flat uint8 vector of length h*w in row-major position order.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ConfigError(f"mask must be non-empty 2-D, got shape {mask.shape}")
    if h <= 0 or w <= 0:
        raise ConfigError(f"target size must be positive, got {h}x{w}")
    src_h, src_w = mask.shape

    # Summed-area table makes each cell an O(1) any-hit query.
    sat = np.zeros((src_h + 1, src_w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask != 0, axis=0), axis=1, out=sat[1:, 1:])

    rows = np.arange(h)
    cols = np.arange(w)
    r0 = (rows * src_h) // h
    r1 = np.maximum(r0 + 1, -(-(rows + 1) * src_h // h))
    c0 = (cols * src_w) // w
    c1 = np.maximum(c0 + 1, -(-(cols + 1) * src_w // w))

    hits = (
        sat[np.ix_(r1, c1)]
        - sat[np.ix_(r0, c1)]
        - sat[np.ix_(r1, c0)]
        + sat[np.ix_(r0, c0)]
    )
    return (hits > 0).astype(np.uint8).reshape(-1)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    directive: AttentionDirective | None = None,
    layer_hw: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention, optionally constrained.

    q is (positions, d_k); k, v are (tokens, d_k) and (tokens, d_v).
    Returns (output, attention_map). When a directive is given, its mask
    is resized to layer_hw (or used as-is if it already has one entry per
    position) and the chosen token columns are constrained before the
    value mix.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ConfigError("q, k, v must all be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ConfigError(f"q has d_k={q.shape[1]} but k has d_k={k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ConfigError(f"k has {k.shape[0]} tokens but v has {v.shape[0]}")
    d_k = q.shape[1]
    if d_k == 0:
        raise ConfigError("d_k must be positive")

    logits = (q @ k.T) / np.sqrt(d_k)
    amap = _softmax_rows(logits)

    if directive is not None and directive.token_indices:
        n = q.shape[0]
        if layer_hw is not None:
            lh, lw = layer_hw
            if lh * lw != n:
                raise ConfigError(f"layer_hw {layer_hw} does not cover {n} positions")
            mask = resize_mask(directive.mask, lh, lw)
        elif directive.mask.size == n:
            mask = (directive.mask.reshape(-1) != 0).astype(np.uint8)
        else:
            raise ConfigError(
                f"directive mask has {directive.mask.size} pixels for {n} positions "
                "and no layer_hw was given"
            )
        amap = constrain_map(amap, mask, directive.token_indices, directive.strength)

    return amap @ v, amap


def average_heatmap(records, token: int, canvas: tuple[int, int]) -> np.ndarray:
    """Average one token's attention across records, upsampled to the canvas.

    Each record's column is reshaped to its layer grid, nearest-neighbor
    upsampled to the canvas, and averaged; the result is min-max scaled to
    uint8 (a constant field maps to all zeros).
    """
    records = list(records)
    if not records:
        raise ConfigError("no attention records to average")
    cw, ch = canvas
    if cw <= 0 or ch <= 0:
        raise ConfigError(f"canvas must be positive, got {cw}x{ch}")
    acc = np.zeros((ch, cw), dtype=np.float64)
    for rec in records:
        if rec.values.ndim != 2 or rec.values.shape[0] != rec.h * rec.w:
            raise ConfigError(f"record {rec.layer!r} values do not match its {rec.h}x{rec.w} grid")
        if not (0 <= token < rec.values.shape[1]):
            raise ConfigError(f"token {token} out of range for record {rec.layer!r}")
        grid = rec.values[:, token].reshape(rec.h, rec.w)
        ys = (np.arange(ch) * rec.h) // ch
        xs = (np.arange(cw) * rec.w) // cw
        acc += grid[np.ix_(ys, xs)]
    acc /= len(records)
    lo = acc.min()
    rng = acc.max() - lo
    if rng == 0:
        return np.zeros((ch, cw), dtype=np.uint8)
    return np.round((acc - lo) / rng * 255.0).astype(np.uint8)
