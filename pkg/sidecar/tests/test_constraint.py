"""Cross-implementation parity of the constraint math with the client."""

import time

import numpy as np
import pytest

from scenetext import constrain_map, resize_mask
from scenetext_sidecar import rescale_columns, shrink_mask


def test_shrink_mask_matches_client_resize_exactly():
    rng = np.random.default_rng(88)
    for _ in range(50):
        src_h, src_w = rng.integers(1, 70, size=2)
        h, w = rng.integers(1, 20, size=2)
        mask = (rng.random((src_h, src_w)) < 0.15).astype(np.uint8)
        ours = shrink_mask(mask, int(h), int(w))
        theirs = resize_mask(mask, int(h), int(w))
        assert ours.tolist() == theirs.tolist()


def test_shrink_mask_rejects_bad_inputs():
    with pytest.raises(ValueError, match="2-D"):
        shrink_mask(np.zeros(4), 2, 2)
    with pytest.raises(ValueError, match="positive"):
        shrink_mask(np.zeros((4, 4)), 0, 2)


def test_rescale_columns_matches_client_constraint_within_tolerance():
    start = time.perf_counter()
    rng = np.random.default_rng(89)
    worst = 0.0
    for _ in range(200):
        positions = int(rng.integers(1, 80))
        tokens = int(rng.integers(1, 12))
        weights = rng.random((positions, tokens)).astype(np.float32)
        weights /= weights.sum(axis=1, keepdims=True)
        mask = rng.integers(0, 2, size=positions).astype(np.uint8)
        count = int(rng.integers(0, tokens + 1))
        indices = set(rng.choice(tokens, size=count, replace=False).tolist())
        strength = float(rng.uniform(0.0, 10.0))

        ours = rescale_columns(weights, mask, indices, strength)
        theirs = constrain_map(weights.astype(np.float64), mask, indices, strength)
        worst = max(worst, float(np.abs(ours - theirs).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5
    print(
        f"\n[{'PASS' if ok else 'FAIL'}] constraint parity across implementations: "
        f"max abs diff {worst:.2e} over 200 random maps (<= 1e-5), {elapsed:.2f}s"
    )
    assert ok


def test_rescale_columns_leaves_other_columns_bit_identical():
    rng = np.random.default_rng(90)
    weights = rng.random((30, 5)).astype(np.float32)
    mask = rng.integers(0, 2, size=30).astype(np.uint8)
    out = rescale_columns(weights, mask, {1, 3}, 6.0)
    for j in (0, 2, 4):
        assert out[:, j].tobytes() == weights[:, j].tobytes()
    for j in (1, 3):
        want = np.float32(6.0) * weights[:, j] * mask.astype(np.float32)
        assert np.array_equal(out[:, j], want)


def test_rescale_columns_rejects_bad_inputs():
    weights = np.ones((4, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="positions"):
        rescale_columns(weights, np.ones(5), {0}, 2.0)
    with pytest.raises(ValueError, match="out of range"):
        rescale_columns(weights, np.ones(4), {3}, 2.0)
    with pytest.raises(ValueError, match="2-D"):
        rescale_columns(np.ones(4), np.ones(4), {0}, 2.0)
