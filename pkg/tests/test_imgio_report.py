"""Image I/O round trips and figure file rendering."""

import numpy as np
import pytest
from PIL import Image

from scenetext import imgio, report
from scenetext.errors import ConfigError


def test_gray_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(12, 20), dtype=np.uint8)
    for ext in ("png", "pgm"):
        path = tmp_path / f"img.{ext}"
        imgio.save_gray(path, img)
        assert np.array_equal(imgio.load_gray(path), img)


def test_binary_round_trip(tmp_path):
    mask = np.random.default_rng(1).integers(0, 2, size=(9, 9), dtype=np.uint8)
    path = tmp_path / "mask.png"
    imgio.save_binary(path, mask)
    raw = np.asarray(Image.open(path))
    assert set(np.unique(raw)) <= {0, 255}
    assert np.array_equal(imgio.load_binary(path), mask)


def test_load_gray_flattens_color(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    path = tmp_path / "color.png"
    Image.fromarray(rgb, "RGB").save(path)
    gray = imgio.load_gray(path)
    assert gray.shape == (4, 4) and gray.dtype == np.uint8


def test_load_gray_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        imgio.load_gray(tmp_path / "absent.png")


def test_save_rgb_layout(tmp_path):
    chw = np.zeros((3, 2, 4), dtype=np.uint8)
    chw[1, :, :] = 200  # green plane
    path = tmp_path / "rgb.png"
    imgio.save_rgb(path, chw)
    back = np.asarray(Image.open(path))
    assert back.shape == (2, 4, 3)
    assert (back[..., 1] == 200).all() and (back[..., 0] == 0).all()
    with pytest.raises(ConfigError, match=r"\(3, h, w\)"):
        imgio.save_rgb(path, np.zeros((2, 4, 3), dtype=np.uint8))


def test_latent_to_image_mapping():
    z = np.array([[[-1.0, 0.0, 1.0, 2.0, -3.0]]])
    out = imgio.latent_to_image(z)
    assert out.dtype == np.uint8
    assert out.tolist() == [[[0, 128, 255, 255, 0]]]


def test_heatmap_grid_file(tmp_path):
    heat = np.linspace(0, 255, 64).reshape(8, 8)
    path = tmp_path / "grid.png"
    report.save_heatmap_grid([("sign", heat), ("poster", heat.T)], path)
    assert path.stat().st_size > 0
    with pytest.raises(ValueError):
        report.save_heatmap_grid([], tmp_path / "never.png")


def test_metrics_chart_file(tmp_path):
    metrics = {
        "en": {"accuracy": 90.0, "edit_accuracy": 95.5, "n": 10},
        "fr": {"accuracy": 80.0, "edit_accuracy": 88.0, "n": 4},
    }
    path = tmp_path / "chart.png"
    report.save_metrics_chart(metrics, path)
    assert path.stat().st_size > 0
    with pytest.raises(ValueError):
        report.save_metrics_chart({}, tmp_path / "never.png")
