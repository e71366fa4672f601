"""Contrastive composition of noise predictions.

Four conditions drive each denoising step: unconditional, text-only,
text + sketch edges, and text + positive image prompt (edges plus a frame
around the text region). They are blended by nesting three guidance
moves: classifier-free guidance on the text, a push from text-only toward
the edge-conditioned prediction, and a smaller push from the edge
prediction toward the framed one:

    pos  = eps_edge + s_pos * (eps_pip - eps_edge)
    out  = eps_uncond + s_cfg * (eps_text - eps_uncond)
                      + s_neg * (pos - eps_text)

which is affine in the four predictions with coefficients
(1 - s_cfg, s_cfg - s_neg, s_neg * (1 - s_pos), s_neg * s_pos).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class Condition(str, enum.Enum):
    """The four denoiser conditions, in composition order."""

    UNCOND = "uncond"
    TEXT_ONLY = "text_only"
    EDGE_TEXT = "edge_text"
    PIP_TEXT = "pip_text"


@dataclass(frozen=True)
class GuidanceScales:
    s_cfg: float = 7.5
    s_neg: float = 2.0
    s_pos: float = 0.1

    def __post_init__(self):
        for name in ("s_cfg", "s_neg", "s_pos"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")


def affine_coefficients(scales: GuidanceScales) -> dict[Condition, float]:
    """Per-condition weights of the composed prediction; they sum to 1."""
    return {
        Condition.UNCOND: 1.0 - scales.s_cfg,
        Condition.TEXT_ONLY: scales.s_cfg - scales.s_neg,
        Condition.EDGE_TEXT: scales.s_neg * (1.0 - scales.s_pos),
        Condition.PIP_TEXT: scales.s_neg * scales.s_pos,
    }


def required_conditions(scales: GuidanceScales, constraint_active: bool = False) -> set[Condition]:
    """Conditions whose predictions actually enter the blend.

    Zero-weight conditions are dropped so the sampler can skip their
    denoiser calls entirely; with s_neg == 0 the blend collapses to plain
    classifier-free guidance on {uncond, text_only}. The constraint flag
    does not change the set (the constraint rides along on whichever
    edge-conditioned calls remain) but is accepted so callers can pass
    their full guidance state through one place.
    """
    del constraint_active
    return {cond for cond, coeff in affine_coefficients(scales).items() if coeff != 0.0}


def compose(
    eps_uncond: np.ndarray | None,
    eps_text: np.ndarray | None,
    eps_edge: np.ndarray | None,
    eps_pip: np.ndarray | None,
    scales: GuidanceScales,
) -> np.ndarray:
    """Blend the available predictions into one guided prediction.

    Predictions for dropped (zero-weight) conditions may be None. When
    s_neg == 0 the result is computed as the two-term classifier-free
    form, bit-identical to eps_uncond + s_cfg * (eps_text - eps_uncond).
    """
    given = {
        Condition.UNCOND: eps_uncond,
        Condition.TEXT_ONLY: eps_text,
        Condition.EDGE_TEXT: eps_edge,
        Condition.PIP_TEXT: eps_pip,
    }
    shapes = set()
    for cond in required_conditions(scales):
        if given[cond] is None:
            raise ConfigError(f"missing prediction for required condition {cond.value}")
        shapes.add(np.asarray(given[cond]).shape)
    if len(shapes) > 1:
        raise ConfigError(f"prediction shapes disagree: {sorted(map(str, shapes))}")

    if scales.s_neg == 0.0:
        if eps_text is None:  # s_cfg == 0: pure unconditional
            return np.array(eps_uncond, copy=True)
        if eps_uncond is None:  # s_cfg == 1: pure text
            return np.array(eps_text, copy=True)
        return eps_uncond + scales.s_cfg * (eps_text - eps_uncond)

    full_inputs = (
        eps_uncond is not None
        and eps_text is not None
        and eps_edge is not None
        and (scales.s_pos == 0.0 or eps_pip is not None)
    )
    if full_inputs:
        if scales.s_pos == 0.0:
            positive = eps_edge
        else:
            positive = eps_edge + scales.s_pos * (eps_pip - eps_edge)
        return (
            eps_uncond
            + scales.s_cfg * (eps_text - eps_uncond)
            + scales.s_neg * (positive - eps_text)
        )

    # A zero-coefficient input was dropped (e.g. s_cfg == s_neg drops the
    # text term); fall back to the plain affine sum over what remains.
    coeffs = affine_coefficients(scales)
    out = None
    for cond, arr in given.items():
        if coeffs[cond] == 0.0 or arr is None:
            continue
        term = coeffs[cond] * np.asarray(arr, dtype=np.float64)
        out = term if out is None else out + term
    if out is None:
        raise ConfigError("no predictions left to compose")
    return out
