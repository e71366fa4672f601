"""Noise-prediction composition and condition-set selection."""

import numpy as np
import pytest

from scenetext.errors import ConfigError
from scenetext.guidance import (
    Condition,
    GuidanceScales,
    affine_coefficients,
    compose,
    required_conditions,
)

PAPER = GuidanceScales()


def _quad(rng, shape=(2, 3)):
    return [rng.standard_normal(shape) for _ in range(4)]


def test_default_scales():
    assert (PAPER.s_cfg, PAPER.s_neg, PAPER.s_pos) == (7.5, 2.0, 0.1)


def test_scales_reject_non_finite():
    with pytest.raises(ConfigError):
        GuidanceScales(s_cfg=float("nan"))
    with pytest.raises(ConfigError):
        GuidanceScales(s_neg=float("inf"))


def test_affine_coefficients_paper_values():
    coeffs = affine_coefficients(PAPER)
    assert coeffs[Condition.UNCOND] == -6.5
    assert coeffs[Condition.TEXT_ONLY] == 5.5
    assert coeffs[Condition.EDGE_TEXT] == 1.8
    assert coeffs[Condition.PIP_TEXT] == pytest.approx(0.2)
    assert sum(coeffs.values()) == 1.0


def test_affine_coefficients_sum_near_one_for_random_scales():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scales = GuidanceScales(*rng.uniform(0.0, 12.0, size=3))
        assert sum(affine_coefficients(scales).values()) == pytest.approx(1.0, abs=1e-12)


def test_scalar_composition_value():
    out = compose(
        np.float64(0.0), np.float64(1.0), np.float64(2.0), np.float64(3.0), PAPER
    )
    assert float(out) == 9.7


def test_compose_matches_affine_form():
    rng = np.random.default_rng(1)
    for _ in range(50):
        eu, et, ee, ep = _quad(rng)
        coeffs = affine_coefficients(PAPER)
        want = (
            coeffs[Condition.UNCOND] * eu
            + coeffs[Condition.TEXT_ONLY] * et
            + coeffs[Condition.EDGE_TEXT] * ee
            + coeffs[Condition.PIP_TEXT] * ep
        )
        got = compose(eu, et, ee, ep, PAPER)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_compose_matches_affine_form_for_random_scales():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scales = GuidanceScales(*rng.uniform(0.1, 10.0, size=3))
        eu, et, ee, ep = _quad(rng)
        coeffs = affine_coefficients(scales)
        want = sum(
            coeffs[c] * e
            for c, e in zip(Condition, (eu, et, ee, ep))
        )
        got = compose(eu, et, ee, ep, scales)
        denom = max(np.max(np.abs(want)), 1e-12)
        assert np.max(np.abs(got - want)) / denom <= 1e-9


def test_compose_is_linear_in_inputs():
    rng = np.random.default_rng(3)
    eu, et, ee, ep = _quad(rng)
    base = compose(eu, et, ee, ep, PAPER)
    scaled = compose(3.5 * eu, 3.5 * et, 3.5 * ee, 3.5 * ep, PAPER)
    assert np.allclose(scaled, 3.5 * base, rtol=1e-12)


def test_cfg_collapse_is_bit_exact():
    rng = np.random.default_rng(4)
    scales = GuidanceScales(s_cfg=7.5, s_neg=0.0, s_pos=0.1)
    eu, et = rng.standard_normal((2, 4, 5))
    want = eu + scales.s_cfg * (et - eu)
    got = compose(eu, et, None, None, scales)
    assert got.tobytes() == want.tobytes()


def test_cfg_collapse_degenerate_corners_return_copies():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((3, 3))
    # s_cfg = 1 with s_neg = 0 leaves only the text term.
    out = compose(None, e, None, None, GuidanceScales(1.0, 0.0, 0.5))
    assert np.array_equal(out, e) and out is not e
    # s_cfg = 0 with s_neg = 0 leaves only the unconditional term.
    out = compose(e, None, None, None, GuidanceScales(0.0, 0.0, 0.5))
    assert np.array_equal(out, e) and out is not e


def test_required_conditions_default_needs_all_four():
    assert required_conditions(PAPER) == set(Condition)


def test_required_conditions_drops_terms_with_zero_coefficients():
    # s_neg = 0 silences both image-conditioned calls.
    assert required_conditions(GuidanceScales(7.5, 0.0, 0.1)) == {
        Condition.UNCOND,
        Condition.TEXT_ONLY,
    }
    # s_pos = 0 silences only the perimeter-marked condition.
    assert Condition.PIP_TEXT not in required_conditions(GuidanceScales(7.5, 2.0, 0.0))
    # s_cfg = s_neg makes the text-only term vanish.
    assert Condition.TEXT_ONLY not in required_conditions(GuidanceScales(2.0, 2.0, 0.1))
    # The fully degenerate corner needs a single call.
    assert required_conditions(GuidanceScales(1.0, 1.0, 0.0)) == {Condition.EDGE_TEXT}


def test_compose_rejects_missing_required_input():
    rng = np.random.default_rng(6)
    eu, et, ee, _ = _quad(rng)
    with pytest.raises(ConfigError):
        compose(eu, et, ee, None, PAPER)


def test_compose_rejects_shape_mismatch():
    rng = np.random.default_rng(7)
    eu, et, ee, ep = _quad(rng)
    with pytest.raises(ConfigError):
        compose(eu, et, ee, ep[:1], PAPER)
