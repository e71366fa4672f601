"""Canny edge extraction used to condition generation on the text sketch.

Stages: 5x5 Gaussian blur, 3x3 Sobel gradients, direction quantization to
{0, 45, 90, 135} degrees, non-maximum suppression, double threshold, and
transitive 8-connected hysteresis.

The arithmetic is pinned so that an independently written implementation
reproduces the output bit-for-bit:

- all math in float64, borders use symmetric (edge-repeating) padding;
- the Gaussian kernel is normalized by summing entries row-major, one by
  one, and convolutions accumulate kernel taps in the same row-major
  order;
- gradient magnitude is sqrt(gx*gx + gy*gy);
- direction bins compare |gy| against |gx|*tan(22.5deg) and
  |gx|*tan(67.5deg) with the tangents computed as sqrt(2)-1 and sqrt(2)+1,
  ties resolved toward the lower bin, and the diagonal split on the sign
  of gx*gy (product == 0 goes to the 135 bin);
- suppression keeps a pixel iff its magnitude is positive, strictly
  greater than the row-major-earlier neighbor along the quantized
  direction, and >= the later one (a tied run keeps only its first
  pixel), with out-of-image neighbors treated as 0;
- strong means magnitude > high, weak means low < magnitude <= high, both
  strictly; weak pixels survive iff their 8-connected component (over
  strong and weak pixels together) contains at least one strong pixel.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ConfigError

DEFAULT_LOW = 100.0
DEFAULT_HIGH = 200.0
DEFAULT_SIGMA = 1.4

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
_TAN_LO = math.sqrt(2.0) - 1.0  # tan(22.5 deg)
_TAN_HI = math.sqrt(2.0) + 1.0  # tan(67.5 deg)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """5x5 Gaussian, normalized by sequential row-major summation."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    offsets = (-2.0, -1.0, 0.0, 1.0, 2.0)
    raw = [
        [math.exp(-(x * x + y * y) / (2.0 * sigma * sigma)) for x in offsets]
        for y in offsets
    ]
    total = 0.0
    for row in raw:
        for v in row:
            total += v
    return np.array([[v / total for v in row] for row in raw])


def _convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate with symmetric padding, accumulating taps row-major.

    The accumulation order matters: each output pixel is built by the same
    left-to-right sequence of adds a per-pixel loop would produce.
    """
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    h, w = img.shape
    padded = np.pad(img, ((py, py), (px, px)), mode="symmetric")
    out = np.zeros((h, w), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            out += kernel[ky, kx] * padded[ky : ky + h, kx : kx + w]
    return out


def canny(
    img: np.ndarray,
    low: float = DEFAULT_LOW,
    high: float = DEFAULT_HIGH,
    sigma: float = DEFAULT_SIGMA,
) -> np.ndarray:
    """Detect edges in a grayscale image; returns a uint8 {0,1} map.

    Thresholds are compared against raw Sobel magnitudes (which reach
    ~1000 on a hard 0..255 step), so the 100/200 defaults sit well below
    real edges while rejecting blur noise.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ConfigError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if low < 0 or high < low:
        raise ConfigError(f"need 0 <= low <= high, got low={low} high={high}")

    blurred = _convolve(img.astype(np.float64), gaussian_kernel(sigma))
    gx = _convolve(blurred, _SOBEL_X)
    gy = _convolve(blurred, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)

    adx = np.abs(gx)
    ady = np.abs(gy)
    bin0 = ady <= adx * _TAN_LO
    diag = ~bin0 & (ady < adx * _TAN_HI)
    bin45 = diag & (gx * gy > 0)
    bin135 = diag & ~bin45
    bin90 = ~bin0 & ~diag

    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")

    def neighbor(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    keep = bin0 & (mag > neighbor(0, -1)) & (mag >= neighbor(0, 1))
    keep |= bin45 & (mag > neighbor(-1, -1)) & (mag >= neighbor(1, 1))
    keep |= bin90 & (mag > neighbor(-1, 0)) & (mag >= neighbor(1, 0))
    keep |= bin135 & (mag > neighbor(-1, 1)) & (mag >= neighbor(1, -1))
    keep &= mag > 0
    nms = np.where(keep, mag, 0.0)

    strong = nms > high
    weak = (nms > low) & ~strong
    candidates = strong | weak
    labels, count = ndimage.label(candidates, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros((h, w), dtype=np.uint8)
    anchored = np.isin(labels, np.unique(labels[strong]))
    return (candidates & anchored).astype(np.uint8)
