"""Frame codec, transports, loopback server, and the remote denoiser adapter."""

import json
import sys
import textwrap

import numpy as np
import pytest

from scenetext.errors import ProtocolError, ServerError, WireTimeout
from scenetext.guidance import Condition
from scenetext.loopback import LoopbackServer
from scenetext.wire import (
    MSG_ERROR,
    MSG_REQUEST,
    MSG_RESPONSE,
    RemoteDenoiser,
    Transport,
    WireClient,
    decode_frame,
    encode_frame,
    read_frame,
)


def _tensors():
    rng = np.random.default_rng(0)
    return [
        ("z", rng.standard_normal((3, 8, 8)).astype(np.float32)),
        ("mask", rng.integers(0, 2, size=(16, 16), dtype=np.uint8)),
    ]


def test_roundtrip_preserves_header_and_tensors():
    tensors = _tensors()
    frame = decode_frame(encode_frame({"op": "predict_noise", "id": 7, "t": 500}, tensors))
    assert frame.msg_type == MSG_REQUEST
    assert frame.header["op"] == "predict_noise"
    assert frame.header["id"] == 7 and frame.header["t"] == 500
    assert [n for n, _ in frame.tensors] == ["z", "mask"]
    for (_, sent), (_, got) in zip(tensors, frame.tensors):
        assert got.dtype == sent.dtype and got.shape == sent.shape
        assert got.tobytes() == sent.tobytes()


def test_reencoding_a_decoded_frame_is_byte_identical():
    raw = encode_frame({"op": "ping", "id": 1}, _tensors(), MSG_RESPONSE)
    frame = decode_frame(raw)
    again = encode_frame(frame.header, frame.tensors, frame.msg_type)
    assert again == raw


def test_frame_prefix_bytes():
    raw = encode_frame({"op": "capabilities", "id": 1})
    assert raw[:4] == b"DTXT"
    assert raw[4] == 1  # version
    assert raw[5] == MSG_REQUEST
    # No tensors: payload_len sits right after the header and reads zero.
    header_len = int.from_bytes(raw[6:10], "little")
    assert raw[10 + header_len :] == bytes(8)


def test_bool_arrays_travel_as_u8():
    mask = np.array([[True, False], [False, True]])
    frame = decode_frame(encode_frame({"op": "x", "id": 1}, [("m", mask)]))
    got = frame.tensor("m")
    assert got.dtype == np.uint8
    assert np.array_equal(got, mask.astype(np.uint8))
    with pytest.raises(ProtocolError, match="no tensor named"):
        frame.tensor("absent")


def test_decode_errors_name_byte_offsets():
    raw = bytearray(encode_frame({"op": "x", "id": 1}))
    bad_magic = bytes(b"XTXD") + bytes(raw[4:])
    with pytest.raises(ProtocolError, match="at byte 0"):
        decode_frame(bad_magic)
    bad_version = bytes(raw[:4]) + b"\x09" + bytes(raw[5:])
    with pytest.raises(ProtocolError, match="at byte 4"):
        decode_frame(bad_version)
    bad_type = bytes(raw[:5]) + b"\x07" + bytes(raw[6:])
    with pytest.raises(ProtocolError, match="at byte 5"):
        decode_frame(bad_type)
    with pytest.raises(ProtocolError, match="truncated at byte 6"):
        decode_frame(bytes(raw[:6]))
    with pytest.raises(ProtocolError, match=r"length"):
        decode_frame(bytes(raw) + b"\x00")


def _craft(descriptors, payload):
    """Build a frame by hand so descriptor tables can lie about the payload."""
    header = json.dumps({"op": "x", "id": 1, "tensors": descriptors}).encode("utf-8")
    return (
        b"DTXT"
        + bytes([1, MSG_REQUEST])
        + len(header).to_bytes(4, "little")
        + header
        + len(payload).to_bytes(8, "little")
        + payload
    )


def test_decode_rejects_malformed_tensor_tables():
    # Descriptor offsets must be contiguous and in order.
    with pytest.raises(ProtocolError, match="expected 0"):
        decode_frame(_craft(
            [{"name": "z", "dtype": "f32", "shape": [2, 2], "offset": 4, "length": 16}],
            bytes(20),
        ))
    with pytest.raises(ProtocolError, match="malformed tensor descriptor"):
        decode_frame(_craft([{"name": "z"}], b""))
    with pytest.raises(ProtocolError, match="overruns"):
        decode_frame(_craft(
            [{"name": "z", "dtype": "u8", "shape": [8], "offset": 0, "length": 8}],
            bytes(4),
        ))


def test_decode_rejects_wrong_length_and_dtype():
    with pytest.raises(ProtocolError, match="itemsize"):
        decode_frame(_craft(
            [{"name": "z", "dtype": "f32", "shape": [2], "offset": 0, "length": 7}],
            bytes(7),
        ))
    with pytest.raises(ProtocolError, match="dtype"):
        decode_frame(_craft(
            [{"name": "z", "dtype": "f64", "shape": [1], "offset": 0, "length": 8}],
            bytes(8),
        ))
    with pytest.raises(ProtocolError, match="trailing"):
        decode_frame(_craft(
            [{"name": "z", "dtype": "u8", "shape": [4], "offset": 0, "length": 4}],
            bytes(8),
        ))


class _ScriptedTransport(Transport):
    """Feeds pre-encoded reply frames back to the client under test."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.sent = []
        self.buffer = b""

    def send(self, data):
        self.sent.append(data)
        self.buffer = self.replies.pop(0)

    def recv_exact(self, n):
        if len(self.buffer) < n:
            raise WireTimeout(f"receive timed out after 0 of {n} bytes")
        out, self.buffer = self.buffer[:n], self.buffer[n:]
        return out

    def close(self):
        pass


def test_client_rejects_mismatched_response_id():
    reply = encode_frame({"id": 999}, msg_type=MSG_RESPONSE)
    client = WireClient(_ScriptedTransport([reply]))
    with pytest.raises(ProtocolError, match="does not match request id 1"):
        client.request("capabilities")


def test_client_surfaces_error_frames_with_code():
    reply = encode_frame(
        {"id": 1, "code": "bad_session", "message": "nope"}, msg_type=MSG_ERROR
    )
    client = WireClient(_ScriptedTransport([reply]))
    with pytest.raises(ServerError, match=r"\[bad_session\]") as exc_info:
        client.request("predict_noise")
    assert exc_info.value.code == "bad_session"


def test_timeouts_are_retryable():
    client = WireClient(_ScriptedTransport([b""]))
    with pytest.raises(WireTimeout) as exc_info:
        client.request("capabilities")
    assert exc_info.value.retryable


@pytest.fixture(scope="module")
def echo_server():
    with LoopbackServer(mode="echo", latent_shape=(3, 16, 16)) as server:
        yield server


def _connect(server):
    return WireClient.connect(server.host, server.port, timeout=10.0)


def _start_session(client):
    edge = np.zeros((32, 32), dtype=np.uint8)
    pip = np.zeros((32, 32), dtype=np.uint8)
    pip[0, :] = 1
    return client.init_session("A sign on a wall", ["sign"], edge, pip, (32, 32))


def test_loopback_capabilities(echo_server):
    with _connect(echo_server) as client:
        caps = client.capabilities()
    assert caps["mode"] == "echo"
    assert "predict_noise" in caps["supports"]
    assert "ocr" not in caps["supports"]
    assert tuple(caps["latent_shape"]) == (3, 16, 16)


def test_loopback_sessions_agree_on_same_inputs(echo_server):
    with _connect(echo_server) as client:
        a = _start_session(client)
        b = _start_session(client)
    assert a.session_id != b.session_id
    assert a.token_indices == b.token_indices == frozenset({1})
    assert a.token_count == b.token_count == 5
    assert a.latent_shape == (3, 16, 16)


def test_loopback_echo_returns_latent_exactly(echo_server):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((3, 16, 16)).astype(np.float32)
    with _connect(echo_server) as client:
        session = _start_session(client)
        eps = client.predict_noise(session, z, 500, Condition.TEXT_ONLY)
    assert eps.tobytes() == z.tobytes()


def test_loopback_batch_matches_request_order(echo_server):
    rng = np.random.default_rng(4)
    z = rng.standard_normal((3, 16, 16)).astype(np.float32)
    conds = [Condition.UNCOND, Condition.TEXT_ONLY, Condition.EDGE_TEXT]
    with _connect(echo_server) as client:
        session = _start_session(client)
        out = client.predict_noise_batch(session, z, 500, conds)
    assert len(out) == 3
    for eps in out:
        assert eps.tobytes() == z.tobytes()


def test_loopback_encode_decode_identity(echo_server):
    img = np.random.default_rng(5).integers(0, 256, size=(32, 32), dtype=np.uint8)
    with _connect(echo_server) as client:
        session = _start_session(client)
        latent = client.encode_latent(session, img)
        back = client.decode_latent(session, latent)
    assert np.array_equal(back.astype(np.uint8), img)


def test_loopback_rejects_unknown_session_and_shape(echo_server):
    from scenetext.wire import Session

    with _connect(echo_server) as client:
        ghost = Session("nope", "", frozenset(), 0, (3, 16, 16))
        with pytest.raises(ServerError) as exc_info:
            client.predict_noise(ghost, np.zeros((3, 16, 16), np.float32), 1, "uncond")
        assert exc_info.value.code == "bad_session"

        session = _start_session(client)
        with pytest.raises(ServerError) as exc_info:
            client.predict_noise(session, np.zeros((3, 8, 8), np.float32), 1, "uncond")
        assert exc_info.value.code == "bad_shape"
        with pytest.raises(ServerError) as exc_info:
            client.request("ocr", {}, [])
        assert exc_info.value.code == "unsupported_op"


def test_loopback_zero_mode_and_shutdown():
    with LoopbackServer(mode="zero", latent_shape=(1, 4, 4)) as server:
        with _connect(server) as client:
            session = _start_session(client)
            z = np.ones((1, 4, 4), dtype=np.float32)
            eps = client.predict_noise(session, z, 10, Condition.UNCOND)
            assert not eps.any()
            client.shutdown()


def test_remote_denoiser_is_transport_transparent(echo_server):
    rng = np.random.default_rng(6)
    z = rng.standard_normal((3, 16, 16)).astype(np.float32)
    with _connect(echo_server) as client:
        session = _start_session(client)
        denoiser = RemoteDenoiser(client, session)
        eps = denoiser.predict(z, 500, Condition.EDGE_TEXT)
    assert eps.tobytes() == z.tobytes()


def test_stdio_transport_round_trip():
    child = textwrap.dedent("""
        import sys
        from scenetext import wire

        class Stdio(wire.Transport):
            def recv_exact(self, n):
                data = sys.stdin.buffer.read(n)
                if data is None or len(data) < n:
                    raise SystemExit(0)
                return data

            def send(self, data):
                sys.stdout.buffer.write(data)
                sys.stdout.buffer.flush()

        t = Stdio()
        while True:
            f = wire.read_frame(t)
            t.send(wire.encode_frame(
                {"id": f.header.get("id"), "pong": True},
                f.tensors,
                wire.MSG_RESPONSE,
            ))
    """)
    client = WireClient.spawn([sys.executable, "-c", child])
    try:
        payload = np.arange(12, dtype=np.float32).reshape(3, 4)
        frame = client.request("ping", tensors=[("x", payload)])
        assert frame.header["pong"] is True
        assert np.array_equal(frame.tensor("x"), payload)
    finally:
        client.close()
