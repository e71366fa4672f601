"""Denoiser service speaking the scene-text wire protocol.

An analytic backbone with real per-layer attention-constraint hooks in
both its base and edge-control branches, a latent codec, optional
template OCR, and the TCP server tying them together.
"""

from .backbone import AnalyticBackbone, embed_prompt, resolve_tokens, token_embedding
from .constraint import rescale_columns, shrink_mask
from .ocr import BankError, GlyphBank
from .protocol import (
    MSG_ERROR,
    MSG_REQUEST,
    MSG_RESPONSE,
    Frame,
    FrameError,
    pack_frame,
    read_frame,
    unpack_frame,
)
from .server import SidecarConfig, SidecarServer

__version__ = "0.1.0"

__all__ = [
    "AnalyticBackbone",
    "BankError",
    "Frame",
    "FrameError",
    "GlyphBank",
    "MSG_ERROR",
    "MSG_REQUEST",
    "MSG_RESPONSE",
    "SidecarConfig",
    "SidecarServer",
    "embed_prompt",
    "pack_frame",
    "read_frame",
    "rescale_columns",
    "resolve_tokens",
    "shrink_mask",
    "token_embedding",
    "unpack_frame",
    "__version__",
]
