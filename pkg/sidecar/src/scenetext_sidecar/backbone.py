"""Deterministic analytic backbone behind the wire server.

Stands in for a pretrained latent-diffusion stack plus its edge-control
branch: fixed random projections play the role of weights, text tokens
embed through a hash-seeded table, and every prediction routes through
real per-layer cross-attention in two branches (base and control) where
the region constraint hooks in. The math is cheap and exactly
reproducible, which is what server conformance and constraint-parity
tests need; a real backbone would replace this class behind the same
interface and the protocol surface would not change.
"""

from __future__ import annotations

import hashlib
import math
import string

import numpy as np

from .constraint import rescale_columns, shrink_mask

EMBED_DIM = 32
LATENT_CHANNELS = 3
LATENT_STRIDE = 8  # canvas pixels per latent cell, both axes


def _hash_rng(*parts: bytes) -> np.random.Generator:
    digest = hashlib.sha256(b"\x1f".join(parts)).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def token_embedding(token: str) -> np.ndarray:
    vec = _hash_rng(b"token", token.encode("utf-8")).standard_normal(EMBED_DIM)
    return (vec / math.sqrt(EMBED_DIM)).astype(np.float32)


def embed_prompt(prompt: str) -> np.ndarray:
    """(tokens, dim) embedding; the empty prompt is one null slot."""
    tokens = prompt.split()
    if not tokens:
        return token_embedding("\x00null")[None, :]
    return np.stack([token_embedding(t) for t in tokens])


def resolve_tokens(prompt: str, wordlist) -> tuple[list[str], list[int]]:
    """Token list and positions whose normalized form is in the wordlist."""
    words = {w.lower() for w in wordlist}
    tokens = prompt.split()
    hits = [
        i for i, t in enumerate(tokens)
        if t.strip(string.punctuation).lower() in words
    ]
    return tokens, hits


def _block_mean(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = arr.shape
    out = np.empty((h, w), dtype=np.float32)
    for i in range(h):
        r0 = (i * src_h) // h
        r1 = max(r0 + 1, math.ceil((i + 1) * src_h / h))
        for j in range(w):
            c0 = (j * src_w) // w
            c1 = max(c0 + 1, math.ceil((j + 1) * src_w / w))
            out[i, j] = arr[r0:r1, c0:c1].mean()
    return out


def _upsample_nearest(field: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = field.shape
    rows = (np.arange(h) * src_h) // h
    cols = (np.arange(w) * src_w) // w
    return field[rows][:, cols]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float32)
    return e / e.sum(axis=1, keepdims=True)


def _positions(h: int, w: int, phase: float) -> np.ndarray:
    """Resolution-independent positional encoding, (h*w, dim)."""
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, h, dtype=np.float32),
        np.linspace(0.0, 1.0, w, dtype=np.float32),
        indexing="ij",
    )
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    freqs = np.arange(1, EMBED_DIM // 2 + 1, dtype=np.float32)
    angles = coords[:, :1] * freqs[None, :] + coords[:, 1:] * freqs[None, :] * 0.7 + phase
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(np.float32)


class _Layer:
    """One cross-attention layer's fixed projections, shared by sizes."""

    def __init__(self, rng: np.random.Generator, phase: float):
        scale = 1.0 / math.sqrt(EMBED_DIM)
        self.w_k = (rng.standard_normal((EMBED_DIM, EMBED_DIM)) * scale).astype(np.float32)
        self.w_v = (rng.standard_normal((EMBED_DIM, EMBED_DIM)) * scale).astype(np.float32)
        self.u_q = rng.standard_normal(EMBED_DIM).astype(np.float32)
        self.w_o = (rng.standard_normal(EMBED_DIM) * scale).astype(np.float32)
        self.phase = phase

    def attend(self, pooled: np.ndarray, text: np.ndarray, constrain) -> np.ndarray:
        h, w = pooled.shape
        q = pooled.reshape(-1, 1) * self.u_q[None, :] + _positions(h, w, self.phase)
        k = text @ self.w_k
        v = text @ self.w_v
        weights = _softmax_rows((q @ k.T) / np.float32(math.sqrt(EMBED_DIM)))
        weights = constrain(weights, (h, w))
        return ((weights @ v) @ self.w_o).reshape(h, w)


class AnalyticBackbone:
    """Fixed-weight two-branch denoiser with constraint hooks."""

    def __init__(self, seed: int = 2026):
        rng = np.random.default_rng(seed)
        self.base_layers = [_Layer(rng, 0.0), _Layer(rng, 1.3)]
        self.control_layers = [_Layer(rng, 2.1), _Layer(rng, 3.4)]
        self.base_gain = rng.standard_normal(LATENT_CHANNELS).astype(np.float32)
        self.control_gain = rng.standard_normal(LATENT_CHANNELS).astype(np.float32)

    @staticmethod
    def latent_shape(canvas: tuple[int, int]) -> tuple[int, int, int]:
        w, h = canvas
        return (LATENT_CHANNELS, max(1, h // LATENT_STRIDE), max(1, w // LATENT_STRIDE))

    @staticmethod
    def _layer_sizes(lh: int, lw: int) -> list[tuple[int, int]]:
        return [
            (max(1, lh // 8), max(1, lw // 8)),
            (max(1, lh // 4), max(1, lw // 4)),
        ]

    def predict(
        self,
        z: np.ndarray,
        t: int,
        text: np.ndarray,
        edge: np.ndarray,
        directive: dict | None = None,
        recorder: list | None = None,
    ) -> np.ndarray:
        """One noise prediction; directive constrains the named branches."""
        z = np.asarray(z, dtype=np.float32)
        lh, lw = z.shape[1], z.shape[2]
        sizes = self._layer_sizes(lh, lw)

        def hook(branch: str):
            active = directive is not None and branch in directive["branches"]

            def constrain(weights: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
                if not active:
                    if recorder is not None:
                        recorder.append(
                            {"branch": branch, "res": hw, "before": weights,
                             "after": weights, "mask_vec": None}
                        )
                    return weights
                mvec = shrink_mask(directive["mask"], hw[0], hw[1])
                out = rescale_columns(
                    weights, mvec, directive["token_indices"], directive["strength"]
                )
                if recorder is not None:
                    recorder.append(
                        {"branch": branch, "res": hw, "before": weights,
                         "after": out, "mask_vec": mvec}
                    )
                return out

            return constrain

        plane = z.mean(axis=0)
        base_field = np.zeros((lh, lw), dtype=np.float32)
        for layer, (rh, rw) in zip(self.base_layers, sizes):
            field = layer.attend(_block_mean(plane, rh, rw), text, hook("base"))
            base_field += _upsample_nearest(field, lh, lw)
        base_field /= np.float32(len(self.base_layers))

        control_field = np.zeros((lh, lw), dtype=np.float32)
        edge_hit = np.asarray(edge) != 0
        if edge_hit.any():
            edge_plane = edge_hit.astype(np.float32)
            for layer, (rh, rw) in zip(self.control_layers, sizes):
                field = layer.attend(
                    _block_mean(edge_plane, rh, rw), text, hook("control")
                )
                control_field += _upsample_nearest(field, lh, lw)
            control_field /= np.float32(len(self.control_layers))

        damp = np.float32(1.0 / math.sqrt(1.0 + t / 250.0))
        return (
            damp * z
            + self.base_gain[:, None, None] * base_field[None, :, :]
            + self.control_gain[:, None, None] * control_field[None, :, :]
        ).astype(np.float32)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """(3, h, w) uint8 image to a [-1, 1] latent by 8x8 block means."""
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[0] != LATENT_CHANNELS:
            raise ValueError(f"expected (3, h, w) image, got shape {image.shape}")
        h, w = image.shape[1:]
        if h % LATENT_STRIDE or w % LATENT_STRIDE:
            raise ValueError(f"image dims {h}x{w} must be multiples of {LATENT_STRIDE}")
        lh, lw = h // LATENT_STRIDE, w // LATENT_STRIDE
        planes = [
            _block_mean(image[c].astype(np.float32), lh, lw) / 127.5 - 1.0
            for c in range(LATENT_CHANNELS)
        ]
        return np.stack(planes).astype(np.float32)

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        """[-1, 1] latent back to a (3, h, w) uint8 image at 8x the grid."""
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
            raise ValueError(f"expected ({LATENT_CHANNELS}, h, w) latent, got shape {z.shape}")
        pixels = np.clip((z + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
        return pixels.repeat(LATENT_STRIDE, axis=1).repeat(LATENT_STRIDE, axis=2)
