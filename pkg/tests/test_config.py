"""TOML config loading: defaults, overrides, and typo rejection."""

import pytest

from scenetext.config import AppConfig, load_config, load_wordlist
from scenetext.errors import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "config.toml"
    path.write_text(text)
    return path


def test_defaults_without_file():
    cfg = load_config(None)
    assert cfg == AppConfig()
    assert cfg.raster.canvas == (512, 512)
    assert cfg.raster.font == "embedded"
    assert cfg.raster.atlas_pool == ()
    assert (cfg.edges.low, cfg.edges.high, cfg.edges.sigma) == (100.0, 200.0, 1.4)
    assert (cfg.guidance.s_cfg, cfg.guidance.s_neg, cfg.guidance.s_pos) == (7.5, 2.0, 0.1)
    assert cfg.constraint.enabled and cfg.constraint.strength == 6.0
    assert (cfg.sampler.steps, cfg.sampler.t_train) == (50, 1000)
    assert cfg.backend == "toy_glyph"


def test_file_overrides_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, """
seed = 99
backend = "point_mass"

[raster]
canvas = [256, 128]
font = "atlas"
atlas_image = "glyphs.png"

[edges]
low = 50.0
high = 120.0

[guidance]
s_cfg = 5.0

[constraint]
lambda = 3.0
wordlist = ["sign", "poster"]

[sampler]
steps = 10

[remote]
port = 9000
"""))
    assert cfg.seed == 99 and cfg.backend == "point_mass"
    assert cfg.raster.canvas == (256, 128)
    assert cfg.raster.font == "atlas"
    assert cfg.raster.atlas_image == "glyphs.png"
    assert (cfg.edges.low, cfg.edges.high, cfg.edges.sigma) == (50.0, 120.0, 1.4)
    assert cfg.guidance.s_cfg == 5.0 and cfg.guidance.s_neg == 2.0
    assert cfg.constraint.strength == 3.0
    assert cfg.constraint.wordlist == ("sign", "poster")
    assert cfg.sampler.steps == 10 and cfg.sampler.t_train == 1000
    assert cfg.remote.port == 9000 and cfg.remote.host == "127.0.0.1"


def test_atlas_pool_entries(tmp_path):
    cfg = load_config(_write(tmp_path, """
[raster]
font = "random"
atlas_pool = ["a.png", ["b.png", "b.json"]]
"""))
    assert cfg.raster.atlas_pool == (("a.png", None), ("b.png", "b.json"))


def test_atlas_pool_rejects_bad_entry(tmp_path):
    with pytest.raises(ConfigError, match="atlas_pool"):
        load_config(_write(tmp_path, """
[raster]
atlas_pool = [["a.png", "a.json", "extra"]]
"""))
    with pytest.raises(ConfigError, match="atlas_pool"):
        load_config(_write(tmp_path, """
[raster]
atlas_pool = "a.png"
"""))


def test_unknown_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"\[rasterr\]"):
        load_config(_write(tmp_path, "[rasterr]\nfont = 'embedded'\n"))


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="'lo'"):
        load_config(_write(tmp_path, "[edges]\nlo = 10.0\n"))
    with pytest.raises(ConfigError, match="'strength'"):
        load_config(_write(tmp_path, "[constraint]\nstrength = 2.0\n"))


def test_unknown_backend_rejected(tmp_path):
    with pytest.raises(ConfigError, match="backend"):
        load_config(_write(tmp_path, 'backend = "imaginary"\n'))


def test_bad_canvas_rejected(tmp_path):
    with pytest.raises(ConfigError, match="canvas"):
        load_config(_write(tmp_path, "[raster]\ncanvas = [512]\n"))


def test_invalid_section_values_surface_as_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[guidance]\ns_cfg = 'high'\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[constraint]\nlambda = -1.0\n"))


def test_missing_or_invalid_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.toml")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(_write(tmp_path, "seed = = 3\n"))


def test_load_wordlist(tmp_path):
    path = tmp_path / "words.txt"
    path.write_text("sign\n\n# a comment\n  poster  \nbanner\n")
    assert load_wordlist(path) == ("sign", "poster", "banner")
    empty = tmp_path / "empty.txt"
    empty.write_text("# only comments\n\n")
    with pytest.raises(ConfigError, match="no words"):
        load_wordlist(empty)
    with pytest.raises(ConfigError, match="cannot read"):
        load_wordlist(tmp_path / "nope.txt")
