"""Binary wire protocol for remote denoiser backends.

Frame layout, all integers little-endian:

    offset  size  field
    0       4     magic "DTXT"
    4       1     version (currently 1)
    5       1     msg_type: 1 request, 2 response, 3 error
    6       4     header_len (u32)
    10      n     header: UTF-8 JSON object
    10+n    8     payload_len (u64)
    18+n    m     payload: raw tensor bytes, little-endian

The header carries "op", "id", op-specific fields, and a "tensors" list
of descriptors {name, dtype, shape, offset, length} describing contiguous
non-overlapping spans of the payload in order. Supported dtypes are f32
and u8. Requests and responses are matched by "id"; a response with the
wrong id is a fatal protocol error, while a timeout is retryable.
"""

from __future__ import annotations

import itertools
import json
import socket
import struct
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .attention import AttentionDirective
from .errors import ConfigError, ProtocolError, ServerError, WireTimeout
from .guidance import Condition

MAGIC = b"DTXT"
VERSION = 1
MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3

_PREFIX = struct.Struct("<4sBBI")  # magic, version, msg_type, header_len
_PAYLOAD_LEN = struct.Struct("<Q")

# Corrupt length words should fail fast instead of provoking huge reads.
MAX_HEADER_LEN = 16 * 2**20
MAX_PAYLOAD_LEN = 2**30

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

DEFAULT_TIMEOUT = 120.0


def _wire_dtype(arr: np.ndarray) -> tuple[str, np.dtype]:
    if arr.dtype.kind == "f":
        return "f32", _DTYPES["f32"]
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "u8", _DTYPES["u8"]
    raise ProtocolError(f"dtype {arr.dtype} not representable on the wire")


def encode_frame(header: dict, tensors=(), msg_type: int = MSG_REQUEST) -> bytes:
    """Serialize a header plus named tensors into one frame."""
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise ProtocolError(f"bad msg_type {msg_type}")
    descriptors = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        code, dtype = _wire_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        descriptors.append(
            {
                "name": str(name),
                "dtype": code,
                "shape": [int(s) for s in arr.shape],
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["tensors"] = descriptors
    header_bytes = json.dumps(full_header, separators=(",", ":")).encode("utf-8")
    if len(header_bytes) > MAX_HEADER_LEN:
        raise ProtocolError(f"header of {len(header_bytes)} bytes exceeds limit")
    if offset > MAX_PAYLOAD_LEN:
        raise ProtocolError(f"payload of {offset} bytes exceeds limit")
    return b"".join(
        [
            _PREFIX.pack(MAGIC, VERSION, msg_type, len(header_bytes)),
            header_bytes,
            _PAYLOAD_LEN.pack(offset),
            *chunks,
        ]
    )


@dataclass
class Frame:
    msg_type: int
    header: dict
    tensors: list[tuple[str, np.ndarray]]

    def tensor(self, name: str) -> np.ndarray:
        for n, arr in self.tensors:
            if n == name:
                return arr
        raise ProtocolError(f"frame has no tensor named {name!r}")


def decode_frame(buf: bytes) -> Frame:
    """Parse and validate one frame; errors name the offending offset."""
    if len(buf) < _PREFIX.size:
        raise ProtocolError(f"frame truncated at byte {len(buf)}, need {_PREFIX.size} for prefix")
    magic, version, msg_type, header_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version} at byte 4")
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise ProtocolError(f"bad msg_type {msg_type} at byte 5")
    if header_len > MAX_HEADER_LEN:
        raise ProtocolError(f"header_len {header_len} exceeds limit")
    pos = _PREFIX.size
    if len(buf) < pos + header_len + _PAYLOAD_LEN.size:
        raise ProtocolError(f"frame truncated at byte {len(buf)} inside header/length")
    try:
        header = json.loads(buf[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    pos += header_len
    (payload_len,) = _PAYLOAD_LEN.unpack_from(buf, pos)
    if payload_len > MAX_PAYLOAD_LEN:
        raise ProtocolError(f"payload_len {payload_len} exceeds limit")
    pos += _PAYLOAD_LEN.size
    if len(buf) != pos + payload_len:
        raise ProtocolError(
            f"frame length {len(buf)} != {pos + payload_len} implied by payload_len"
        )
    payload = buf[pos:]

    descriptors = header.pop("tensors", [])
    if not isinstance(descriptors, list):
        raise ProtocolError("tensors descriptor list is malformed")
    tensors = []
    expected_offset = 0
    for d in descriptors:
        try:
            name, code, shape = d["name"], d["dtype"], tuple(int(s) for s in d["shape"])
            offset, length = int(d["offset"]), int(d["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed tensor descriptor {d!r}") from e
        if code not in _DTYPES:
            raise ProtocolError(f"unknown tensor dtype {code!r}")
        if offset != expected_offset:
            raise ProtocolError(
                f"tensor {name!r} at offset {offset}, expected {expected_offset} "
                "(descriptors must be contiguous and in order)"
            )
        dtype = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != count * dtype.itemsize:
            raise ProtocolError(
                f"tensor {name!r} length {length} != shape {shape} * itemsize"
            )
        if offset + length > payload_len:
            raise ProtocolError(f"tensor {name!r} overruns payload at byte {offset + length}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        tensors.append((name, arr.copy()))
        expected_offset = offset + length
    if expected_offset != payload_len:
        raise ProtocolError(
            f"payload has {payload_len - expected_offset} trailing bytes after tensors"
        )
    return Frame(msg_type, header, tensors)


class Transport:
    """Byte-stream interface the client talks through."""

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv_exact(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class TcpTransport(Transport):
    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise ProtocolError(f"cannot connect to {host}:{port}: {e}") from e
        self.sock.settimeout(timeout)

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except socket.timeout as e:
            raise WireTimeout(f"send timed out: {e}") from e
        except OSError as e:
            raise ProtocolError(f"send failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        parts = []
        remaining = n
        while remaining:
            try:
                chunk = self.sock.recv(min(remaining, 1 << 20))
            except socket.timeout as e:
                raise WireTimeout(f"receive timed out after {n - remaining} of {n} bytes") from e
            except OSError as e:
                raise ProtocolError(f"receive failed: {e}") from e
            if not chunk:
                raise ProtocolError(f"connection closed after {n - remaining} of {n} bytes")
            parts.append(chunk)
            remaining -= len(chunk)
        return b"".join(parts)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class StdioTransport(Transport):
    """Frames over a child process's stdin/stdout."""

    def __init__(self, argv: list[str]):
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as e:
            raise ProtocolError(f"cannot spawn {argv[0]!r}: {e}") from e

    def send(self, data: bytes) -> None:
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (OSError, ValueError) as e:
            raise ProtocolError(f"send to subprocess failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        data = self.proc.stdout.read(n)
        if data is None or len(data) < n:
            got = 0 if data is None else len(data)
            raise ProtocolError(f"subprocess closed after {got} of {n} bytes")
        return data

    def close(self) -> None:
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def read_frame(transport: Transport) -> Frame:
    """Read one whole frame off a transport, validating incrementally."""
    prefix = transport.recv_exact(_PREFIX.size)
    magic, version, msg_type, header_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version} at byte 4")
    if header_len > MAX_HEADER_LEN:
        raise ProtocolError(f"header_len {header_len} exceeds limit")
    header = transport.recv_exact(header_len)
    (payload_len,) = _PAYLOAD_LEN.unpack(transport.recv_exact(_PAYLOAD_LEN.size))
    if payload_len > MAX_PAYLOAD_LEN:
        raise ProtocolError(f"payload_len {payload_len} exceeds limit")
    payload = transport.recv_exact(payload_len)
    return decode_frame(
        prefix + header + _PAYLOAD_LEN.pack(payload_len) + payload
    )


@dataclass(frozen=True)
class Session:
    """Server-side generation context established by init_session."""

    session_id: str
    prompt: str
    token_indices: frozenset[int]
    token_count: int
    latent_shape: tuple[int, ...]


def _directive_fields(directive: AttentionDirective | None) -> dict | None:
    if directive is None:
        return None
    branches = []
    if directive.apply_to_base:
        branches.append("base")
    if directive.apply_to_control:
        branches.append("control")
    return {
        "strength": directive.strength,
        "token_indices": sorted(directive.token_indices),
        "branches": branches,
    }


class WireClient:
    """Serialized request/response client over one transport.

    A lock keeps concurrent callers from interleaving frames, ids are
    monotonic per client, and every response id is checked against its
    request. Timeouts surface as retryable WireTimeout; everything else
    about a malformed exchange is a fatal ProtocolError.
    """

    def __init__(self, transport: Transport):
        self._transport = transport
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "WireClient":
        return cls(TcpTransport(host, port, timeout))

    @classmethod
    def spawn(cls, argv: list[str]) -> "WireClient":
        return cls(StdioTransport(argv))

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "WireClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request(self, op: str, fields: dict | None = None, tensors=()) -> Frame:
        header = {"op": op, **(fields or {})}
        with self._lock:
            rid = next(self._ids)
            header["id"] = rid
            self._transport.send(encode_frame(header, tensors, MSG_REQUEST))
            frame = read_frame(self._transport)
        if frame.msg_type == MSG_ERROR:
            raise ServerError(
                str(frame.header.get("code", "unknown")),
                str(frame.header.get("message", "")),
            )
        if frame.msg_type != MSG_RESPONSE:
            raise ProtocolError(f"expected a response frame, got msg_type {frame.msg_type}")
        if frame.header.get("id") != rid:
            raise ProtocolError(
                f"response id {frame.header.get('id')!r} does not match request id {rid}"
            )
        return frame

    def capabilities(self) -> dict:
        return self.request("capabilities").header

    def init_session(
        self,
        prompt: str,
        wordlist,
        edge: np.ndarray,
        pip_edge: np.ndarray,
        canvas: tuple[int, int],
    ) -> Session:
        frame = self.request(
            "init_session",
            {
                "prompt": prompt,
                "wordlist": list(wordlist),
                "canvas": [int(canvas[0]), int(canvas[1])],
            },
            [("edge", np.asarray(edge, dtype=np.uint8)),
             ("pip_edge", np.asarray(pip_edge, dtype=np.uint8))],
        )
        h = frame.header
        try:
            return Session(
                session_id=str(h["session_id"]),
                prompt=prompt,
                token_indices=frozenset(int(i) for i in h["token_indices"]),
                token_count=int(h["token_count"]),
                latent_shape=tuple(int(s) for s in h["latent_shape"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed init_session response: {e}") from e

    def predict_noise(
        self,
        session: Session,
        z: np.ndarray,
        t: int,
        cond: Condition,
        directive: AttentionDirective | None = None,
    ) -> np.ndarray:
        z = np.asarray(z)
        tensors = [("z", z.astype("<f4", copy=False))]
        if directive is not None:
            tensors.append(("mask", np.asarray(directive.mask, dtype=np.uint8)))
        frame = self.request(
            "predict_noise",
            {
                "session_id": session.session_id,
                "t": int(t),
                "cond": Condition(cond).value,
                "directive": _directive_fields(directive),
            },
            tensors,
        )
        eps = frame.tensor("eps")
        if eps.shape != z.shape:
            raise ProtocolError(f"eps shape {eps.shape} does not match latent {z.shape}")
        return eps

    def predict_noise_batch(
        self,
        session: Session,
        z: np.ndarray,
        t: int,
        conds,
        directive: AttentionDirective | None = None,
    ) -> list[np.ndarray]:
        """One round trip for several conditions; results in request order."""
        z = np.asarray(z)
        conds = [Condition(c).value for c in conds]
        if not conds:
            raise ConfigError("predict_noise_batch needs at least one condition")
        tensors = [("z", z.astype("<f4", copy=False))]
        if directive is not None:
            tensors.append(("mask", np.asarray(directive.mask, dtype=np.uint8)))
        frame = self.request(
            "predict_noise_batch",
            {
                "session_id": session.session_id,
                "t": int(t),
                "conds": conds,
                "directive": _directive_fields(directive),
            },
            tensors,
        )
        out = []
        for i in range(len(conds)):
            eps = frame.tensor(f"eps_{i}")
            if eps.shape != z.shape:
                raise ProtocolError(
                    f"eps_{i} shape {eps.shape} does not match latent {z.shape}"
                )
            out.append(eps)
        return out

    def encode_latent(self, session: Session, image: np.ndarray) -> np.ndarray:
        frame = self.request(
            "encode_latent",
            {"session_id": session.session_id},
            [("image", np.asarray(image))],
        )
        return frame.tensor("latent")

    def decode_latent(self, session: Session, z: np.ndarray) -> np.ndarray:
        frame = self.request(
            "decode_latent",
            {"session_id": session.session_id},
            [("latent", np.asarray(z).astype("<f4", copy=False))],
        )
        return frame.tensor("image")

    def ocr(self, image: np.ndarray) -> list[str]:
        frame = self.request("ocr", {}, [("image", np.asarray(image, dtype=np.uint8))])
        return [str(s) for s in frame.header.get("texts", [])]

    def clip_score(self, image: np.ndarray, prompt: str) -> float:
        frame = self.request(
            "clip_score", {"prompt": prompt}, [("image", np.asarray(image, dtype=np.uint8))]
        )
        return float(frame.header["score"])

    def shutdown(self) -> None:
        self.request("shutdown")


class RemoteDenoiser:
    """Adapter exposing a WireClient session as a sampler denoiser."""

    def __init__(self, client: WireClient, session: Session):
        self.client = client
        self.session = session

    def predict(self, z, t, cond, session=None, directive=None):
        return self.client.predict_noise(self.session, z, t, cond, directive)
