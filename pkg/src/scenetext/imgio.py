"""Small PNG/PGM helpers shared by the pipeline and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError


def load_gray(path: str | Path) -> np.ndarray:
    """Read an image as uint8 grayscale (rows, cols)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as e:
        raise ConfigError(f"cannot read image {path}: {e}") from e


def save_gray(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def save_binary(path: str | Path, mask: np.ndarray) -> None:
    """Write a {0,1} map as a black/white image."""
    save_gray(path, np.asarray(mask, dtype=np.uint8) * 255)


def load_binary(path: str | Path) -> np.ndarray:
    return (load_gray(path) >= 128).astype(np.uint8)


def save_rgb(path: str | Path, chw: np.ndarray) -> None:
    """Write a (3, rows, cols) uint8 array as an RGB image."""
    arr = np.asarray(chw)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"expected (3, h, w) image, got shape {arr.shape}")
    Image.fromarray(arr.transpose(1, 2, 0).astype(np.uint8), mode="RGB").save(path)


def latent_to_image(z: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] latent (3, h, w) to a uint8 image, clipping overshoot."""
    z = np.asarray(z, dtype=np.float64)
    return np.clip((z + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
