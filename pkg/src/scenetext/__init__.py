"""Training-free scene-text image generation.

Render target text as a sketch, lift it to Canny edges, and steer a
diffusion denoiser with contrastive image-level prompts plus a localized
cross-attention constraint so the text lands inside its region. Denoisers
are pluggable: analytic local ones for verification and remote backends
over a binary wire protocol.
"""

from .attention import (
    AttentionDirective,
    AttentionRecord,
    ConstraintConfig,
    DEFAULT_WORDLIST,
    average_heatmap,
    constrain_map,
    cross_attention,
    match_wordlist,
    resize_mask,
)
from .config import AppConfig, load_config
from .edges import canny
from .errors import (
    BackendError,
    ConfigError,
    EvalError,
    LayoutError,
    ProtocolError,
    SceneTextError,
    ServerError,
    UnsupportedCodepointError,
    WireTimeout,
)
from .guidance import Condition, GuidanceScales, affine_coefficients, compose, required_conditions
from .metrics import (
    EvalRecord,
    accuracy,
    augment_prompt,
    levenshtein,
    mean_norm_edit,
    norm_edit,
    sample_vocab,
)
from .raster import (
    BBox,
    GlyphAtlas,
    embedded_atlas,
    load_atlas,
    make_nip_edge,
    make_pip_edge,
    make_region_mask,
    place_bbox,
    render_sketch,
)
from .sampler import (
    GaussianAnalyticDenoiser,
    NoiseSchedule,
    PointMassDenoiser,
    ToyGlyphDenoiser,
    ddim_step,
    make_schedule,
    sample,
)
from .wire import RemoteDenoiser, Session, WireClient, decode_frame, encode_frame

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "AttentionDirective",
    "AttentionRecord",
    "BBox",
    "BackendError",
    "Condition",
    "ConfigError",
    "ConstraintConfig",
    "DEFAULT_WORDLIST",
    "EvalError",
    "EvalRecord",
    "GaussianAnalyticDenoiser",
    "GlyphAtlas",
    "GuidanceScales",
    "LayoutError",
    "NoiseSchedule",
    "PointMassDenoiser",
    "ProtocolError",
    "RemoteDenoiser",
    "SceneTextError",
    "ServerError",
    "Session",
    "ToyGlyphDenoiser",
    "UnsupportedCodepointError",
    "WireClient",
    "WireTimeout",
    "accuracy",
    "affine_coefficients",
    "augment_prompt",
    "average_heatmap",
    "canny",
    "compose",
    "constrain_map",
    "cross_attention",
    "ddim_step",
    "decode_frame",
    "embedded_atlas",
    "encode_frame",
    "levenshtein",
    "load_atlas",
    "load_config",
    "make_nip_edge",
    "make_pip_edge",
    "make_region_mask",
    "make_schedule",
    "match_wordlist",
    "mean_norm_edit",
    "norm_edit",
    "place_bbox",
    "render_sketch",
    "required_conditions",
    "resize_mask",
    "sample",
    "sample_vocab",
    "__version__",
]
