"""Server conformance, driven end to end by the client package."""

import dataclasses
import json
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
from PIL import Image

from scenetext import WireClient, constrain_map
from scenetext.config import AppConfig, RasterSection, RemoteSection
from scenetext.errors import ServerError
from scenetext.pipeline import run_generate
from scenetext.raster import BBox
from scenetext_sidecar import SidecarConfig, SidecarServer

CANVAS = 64
LATENT = (3, 8, 8)


@pytest.fixture(scope="module")
def server():
    with SidecarServer(SidecarConfig(debug=True)) as srv:
        yield srv


@pytest.fixture(scope="module")
def client(server):
    with WireClient.connect(server.host, server.port, timeout=10.0) as c:
        yield c


def _edges(size=CANVAS):
    edge = np.zeros((size, size), dtype=np.uint8)
    edge[size // 4 : 3 * size // 4, size // 4] = 1
    edge[size // 4 : 3 * size // 4, 3 * size // 4] = 1
    pip = edge.copy()
    pip[0, :] = 1
    pip[-1, :] = 1
    return edge, pip


def _session(client, size=CANVAS, prompt="A sign on the wall"):
    edge, pip = _edges(size)
    return client.init_session(prompt, ["sign"], edge, pip, (size, size))


def _predict_raw(client, sid, z, t, cond, directive=None, mask=None):
    fields = {"session_id": sid, "t": t, "cond": cond, "directive": directive}
    tensors = [("z", z.astype(np.float32))]
    if mask is not None:
        tensors.append(("mask", mask.astype(np.uint8)))
    return client.request("predict_noise", fields, tensors).tensor("eps")


def test_capabilities_report(client):
    caps = client.capabilities()
    assert caps["backbone"] == "analytic"
    assert caps["latent_shape"] == [3, 64, 64]
    assert caps["canvas"] == [512, 512]
    supports = caps["supports"]
    assert supports == sorted(supports)
    for op in ("init_session", "predict_noise", "predict_noise_batch",
               "encode_latent", "decode_latent", "debug_attention",
               "debug_selectors", "shutdown"):
        assert op in supports
    assert "ocr" not in supports  # no glyph bank configured
    assert "clip_score" not in supports


def test_session_resolves_tokens_and_latent_shape(client):
    session = _session(client)
    assert session.token_indices == frozenset({1})
    assert session.token_count == 5
    assert session.latent_shape == LATENT


def test_predictions_are_deterministic_and_condition_dependent(client):
    session = _session(client)
    rng = np.random.default_rng(21)
    z = rng.standard_normal(LATENT).astype(np.float32)
    eps = {
        cond: _predict_raw(client, session.session_id, z, 500, cond)
        for cond in ("uncond", "text_only", "edge_text", "pip_text")
    }
    again = _predict_raw(client, session.session_id, z, 500, "uncond")
    assert again.tobytes() == eps["uncond"].tobytes()
    assert eps["uncond"].shape == LATENT
    assert eps["uncond"].tobytes() != eps["text_only"].tobytes()   # prompt embedding
    assert eps["text_only"].tobytes() != eps["edge_text"].tobytes()  # control branch
    assert eps["edge_text"].tobytes() != eps["pip_text"].tobytes()   # perimeter band


def test_sessions_with_equal_inputs_predict_identically(client):
    a = _session(client)
    b = _session(client)
    assert a.session_id != b.session_id
    z = np.random.default_rng(22).standard_normal(LATENT).astype(np.float32)
    one = _predict_raw(client, a.session_id, z, 300, "edge_text")
    two = _predict_raw(client, b.session_id, z, 300, "edge_text")
    assert one.tobytes() == two.tobytes()


def test_directive_moves_edge_conditioned_output_only(client):
    session = _session(client)
    z = np.random.default_rng(23).standard_normal(LATENT).astype(np.float32)
    mask = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    mask[8:40, 8:56] = 1
    directive = {"strength": 6.0, "token_indices": [1], "branches": ["base", "control"]}

    plain = _predict_raw(client, session.session_id, z, 500, "edge_text")
    steered = _predict_raw(client, session.session_id, z, 500, "edge_text",
                           directive, mask)
    assert steered.tobytes() != plain.tobytes()

    # A directive shipped on the unconditional call changes nothing.
    u_plain = _predict_raw(client, session.session_id, z, 500, "uncond")
    u_directed = _predict_raw(client, session.session_id, z, 500, "uncond",
                              directive, mask)
    assert u_directed.tobytes() == u_plain.tobytes()


def test_batch_matches_single_calls(client):
    session = _session(client)
    z = np.random.default_rng(24).standard_normal(LATENT).astype(np.float32)
    mask = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    mask[16:48, 16:48] = 1
    directive = {"strength": 4.0, "token_indices": [1], "branches": ["base"]}
    conds = ["uncond", "text_only", "edge_text"]
    frame = client.request(
        "predict_noise_batch",
        {"session_id": session.session_id, "t": 200, "conds": conds,
         "directive": directive},
        [("z", z), ("mask", mask)],
    )
    for i, cond in enumerate(conds):
        want = _predict_raw(client, session.session_id, z, 200, cond,
                            directive, mask)
        assert frame.tensor(f"eps_{i}").tobytes() == want.tobytes()


def test_selector_mapping_is_the_invariant_table(client):
    session = _session(client)
    frame = client.request("debug_selectors", {"session_id": session.session_id})
    h = frame.header
    sel = h["selectors"]
    assert h["token_indices"] == [1]
    assert sel["uncond"]["text"] == h["empty_text"]
    for cond in ("text_only", "edge_text", "pip_text"):
        assert sel[cond]["text"] == h["prompt_text"]
    assert sel["uncond"]["edge_empty"] and sel["text_only"]["edge_empty"]
    assert sel["uncond"]["edge"] == sel["text_only"]["edge"]
    assert not sel["edge_text"]["edge_empty"] and not sel["pip_text"]["edge_empty"]
    assert sel["edge_text"]["edge"] != sel["pip_text"]["edge"]


def test_constraint_hook_parity_with_client(client):
    session = _session(client, size=256)
    z = np.random.default_rng(25).standard_normal((3, 32, 32)).astype(np.float32)
    mask = np.zeros((256, 256), dtype=np.uint8)
    mask[80:176, 48:208] = 1
    directive = {"strength": 6.0, "token_indices": [1], "branches": ["base", "control"]}
    frame = client.request(
        "debug_attention",
        {"session_id": session.session_id, "t": 500, "cond": "edge_text",
         "directive": directive},
        [("z", z), ("mask", mask)],
    )
    records = frame.header["records"]
    assert len(records) == 4  # two layers in each of the two branches
    assert {r["branch"] for r in records} == {"base", "control"}
    assert all(r["constrained"] for r in records)

    worst = 0.0
    for i, rec in enumerate(records):
        before = frame.tensor(f"rec{i}_before")
        after = frame.tensor(f"rec{i}_after")
        mvec = frame.tensor(f"rec{i}_mask")
        h, w = rec["res"]
        assert before.shape == (h * w, session.token_count)
        want = constrain_map(before.astype(np.float64), mvec, {1}, 6.0)
        worst = max(worst, float(np.abs(after - want).max()))
    ok = worst <= 1e-5
    print(
        f"\n[{'PASS' if ok else 'FAIL'}] served constraint matches client "
        f"constraint on captured maps: max abs diff {worst:.2e} over "
        f"{len(records)} layer maps (<= 1e-5)"
    )
    assert ok

    eps = _predict_raw(client, session.session_id, z, 500, "edge_text",
                       directive, mask)
    assert eps.tobytes() == frame.tensor("eps").tobytes()


def test_unconstrained_capture_reports_identity(client):
    session = _session(client)
    z = np.random.default_rng(26).standard_normal(LATENT).astype(np.float32)
    frame = client.request(
        "debug_attention",
        {"session_id": session.session_id, "t": 100, "cond": "text_only"},
        [("z", z)],
    )
    records = frame.header["records"]
    assert {r["branch"] for r in records} == {"base"}  # empty edge skips control
    for i, rec in enumerate(records):
        assert not rec["constrained"]
        before = frame.tensor(f"rec{i}_before")
        after = frame.tensor(f"rec{i}_after")
        assert before.tobytes() == after.tobytes()
        assert np.allclose(before.sum(axis=1), 1.0, atol=1e-5)


def test_latent_codec_round_trip(client):
    rng = np.random.default_rng(27)
    image = rng.integers(0, 256, size=(3, CANVAS, CANVAS)).astype(np.uint8)
    latent = client.request("encode_latent", tensors=[("image", image)]).tensor("latent")
    assert latent.shape == LATENT
    assert latent.dtype == np.float32
    assert np.abs(latent).max() <= 1.0

    decoded = client.request("decode_latent", tensors=[("latent", latent)]).tensor("image")
    assert decoded.shape == (3, CANVAS, CANVAS)
    blocks = image.reshape(3, 8, 8, 8, 8).astype(np.float64)
    means = blocks.mean(axis=(2, 4)).repeat(8, axis=1).repeat(8, axis=2)
    assert np.abs(decoded.astype(np.float64) - means).max() <= 1.0

    flat = np.full((3, CANVAS, CANVAS), 128, dtype=np.uint8)
    enc = client.request("encode_latent", tensors=[("image", flat)]).tensor("latent")
    back = client.request("decode_latent", tensors=[("latent", enc)]).tensor("image")
    assert np.abs(back.astype(int) - 128).max() <= 1


def test_error_codes(client):
    z = np.zeros(LATENT, dtype=np.float32)
    with pytest.raises(ServerError) as e:
        _predict_raw(client, "feedfacefeedface", z, 500, "uncond")
    assert e.value.code == "bad_session"

    session = _session(client)
    with pytest.raises(ServerError) as e:
        _predict_raw(client, session.session_id,
                     np.zeros((3, 4, 4), dtype=np.float32), 500, "uncond")
    assert e.value.code == "bad_shape"
    with pytest.raises(ServerError) as e:
        _predict_raw(client, session.session_id, z, 0, "uncond")
    assert e.value.code == "bad_request"
    with pytest.raises(ServerError) as e:
        _predict_raw(client, session.session_id, z, 500, "sideways")
    assert e.value.code == "bad_request"
    with pytest.raises(ServerError) as e:
        client.request("ocr", tensors=[("image", np.zeros((8, 8), np.uint8))])
    assert e.value.code == "capability_absent"
    with pytest.raises(ServerError) as e:
        client.request("clip_score", {"prompt": "x"},
                       [("image", np.zeros((8, 8, 3), np.uint8))])
    assert e.value.code == "capability_absent"
    with pytest.raises(ServerError) as e:
        client.request("encode_latent",
                       tensors=[("image", np.zeros((3, 30, 30), np.uint8))])
    assert e.value.code == "bad_shape"
    with pytest.raises(ServerError) as e:
        edge, pip = _edges(32)
        client.init_session("A sign", ["sign"], edge, pip, (64, 64))
    assert e.value.code == "bad_shape"


def test_debug_ops_hidden_without_debug_flag():
    with SidecarServer(SidecarConfig()) as srv:
        with WireClient.connect(srv.host, srv.port, timeout=10.0) as c:
            assert "debug_selectors" not in c.capabilities()["supports"]
            with pytest.raises(ServerError) as e:
                c.request("debug_selectors", {"session_id": "x"})
            assert e.value.code == "unsupported_op"


def test_client_pipeline_generates_through_this_server(server, tmp_path):
    cfg = AppConfig(
        backend="remote",
        remote=RemoteSection(host=server.host, port=server.port, timeout=10.0),
        raster=RasterSection(canvas=(CANVAS, CANVAS)),
        seed=11,
    )
    box = BBox(8, 8, 48, 24)
    runs = []
    for name in ("a", "b"):
        result = run_generate("HI", "A sign on the wall", cfg, tmp_path / name, bbox=box)
        img = np.asarray(Image.open(result.image_path))
        assert img.shape == (CANVAS, CANVAS, 3)
        meta = json.loads((tmp_path / name / "metadata.json").read_text())
        assert meta["backend"] == "remote"
        assert meta["retries"] == 0
        runs.append(img)
    assert runs[0].tobytes() == runs[1].tobytes()


def test_cli_serves_and_shuts_down():
    proc = subprocess.Popen(
        [sys.executable, "-m", "scenetext_sidecar.cli", "--port", "0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        line = proc.stdout.readline().strip()
        key, addr = line.split("\t")
        assert key == "listening"
        host, port = addr.rsplit(":", 1)
        with WireClient.connect(host, int(port), timeout=10.0) as c:
            assert c.capabilities()["backbone"] == "analytic"
            frame = c.request("shutdown")
            assert frame.header["stopping"] is True
        assert proc.wait(timeout=10) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()


def test_startup_refuses_half_configured_capabilities(tmp_path):
    from scenetext_sidecar import BankError

    with pytest.raises(BankError, match="model_load"):
        SidecarServer(SidecarConfig(enable_clip=True))
    with pytest.raises(BankError, match="model_load"):
        SidecarServer(SidecarConfig(ocr_sheet=str(tmp_path / "sheet.png")))
    with pytest.raises(BankError, match="cannot read"):
        SidecarServer(SidecarConfig(
            ocr_sheet=str(tmp_path / "missing.png"),
            ocr_manifest=str(tmp_path / "missing.json"),
        ))
