"""Server-side implementation of the denoiser wire format.

Kept independent of the client package on purpose: two codebases that
interoperate over the same bytes are the strongest check either layout
has. Frame layout, all integers little-endian:

    offset  size  field
    0       4     magic "DTXT"
    4       1     version (currently 1)
    5       1     msg_type: 1 request, 2 response, 3 error
    6       4     header_len (u32)
    10      n     header: UTF-8 JSON object
    10+n    8     payload_len (u64)
    18+n    m     payload: raw tensor bytes, little-endian

The header's "tensors" key lists descriptors {name, dtype, shape,
offset, length} covering the payload contiguously and in order. Only f32
and u8 travel on the wire.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DTXT"
VERSION = 1
MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3

MAX_HEADER_LEN = 16 * 2**20
MAX_PAYLOAD_LEN = 2**30

_HEAD = struct.Struct("<4sBBI")
_PLEN = struct.Struct("<Q")
_WIRE_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class FrameError(Exception):
    """A frame that cannot be produced or parsed."""


@dataclass
class Frame:
    msg_type: int
    header: dict
    tensors: list[tuple[str, np.ndarray]]

    def tensor(self, name: str) -> np.ndarray:
        for n, arr in self.tensors:
            if n == name:
                return arr
        raise FrameError(f"frame has no tensor named {name!r}")


def _dtype_code(arr: np.ndarray) -> tuple[str, np.dtype]:
    if arr.dtype.kind == "f":
        return "f32", _WIRE_DTYPES["f32"]
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "u8", _WIRE_DTYPES["u8"]
    raise FrameError(f"dtype {arr.dtype} not representable on the wire")


def pack_frame(header: dict, tensors=(), msg_type: int = MSG_REQUEST) -> bytes:
    """Serialize header fields plus named tensors into one frame."""
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise FrameError(f"bad msg_type {msg_type}")
    table = []
    body = bytearray()
    for name, arr in tensors:
        arr = np.asarray(arr)
        code, dtype = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append(
            {
                "name": str(name),
                "dtype": code,
                "shape": [int(s) for s in arr.shape],
                "offset": len(body),
                "length": len(raw),
            }
        )
        body += raw
    merged = dict(header)
    merged["tensors"] = table
    head = json.dumps(merged, separators=(",", ":")).encode("utf-8")
    if len(head) > MAX_HEADER_LEN:
        raise FrameError(f"header of {len(head)} bytes exceeds limit")
    if len(body) > MAX_PAYLOAD_LEN:
        raise FrameError(f"payload of {len(body)} bytes exceeds limit")
    return (
        _HEAD.pack(MAGIC, VERSION, msg_type, len(head))
        + head
        + _PLEN.pack(len(body))
        + bytes(body)
    )


def unpack_frame(buf: bytes) -> Frame:
    """Parse and validate one complete frame."""
    if len(buf) < _HEAD.size:
        raise FrameError(f"frame truncated at byte {len(buf)}, need {_HEAD.size} for prefix")
    magic, version, msg_type, header_len = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FrameError(f"unsupported version {version} at byte 4")
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise FrameError(f"bad msg_type {msg_type} at byte 5")
    if header_len > MAX_HEADER_LEN:
        raise FrameError(f"header_len {header_len} exceeds limit")
    pos = _HEAD.size
    if len(buf) < pos + header_len + _PLEN.size:
        raise FrameError(f"frame truncated at byte {len(buf)} inside header/length")
    try:
        header = json.loads(buf[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise FrameError("header must be a JSON object")
    pos += header_len
    (payload_len,) = _PLEN.unpack_from(buf, pos)
    if payload_len > MAX_PAYLOAD_LEN:
        raise FrameError(f"payload_len {payload_len} exceeds limit")
    pos += _PLEN.size
    if len(buf) != pos + payload_len:
        raise FrameError(f"frame length {len(buf)} != {pos + payload_len} implied by payload_len")
    payload = buf[pos:]

    table = header.pop("tensors", [])
    if not isinstance(table, list):
        raise FrameError("tensors descriptor list is malformed")
    tensors = []
    cursor = 0
    for d in table:
        try:
            name, code = d["name"], d["dtype"]
            shape = tuple(int(s) for s in d["shape"])
            offset, length = int(d["offset"]), int(d["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise FrameError(f"malformed tensor descriptor {d!r}") from e
        if code not in _WIRE_DTYPES:
            raise FrameError(f"unknown tensor dtype {code!r}")
        if offset != cursor:
            raise FrameError(
                f"tensor {name!r} at offset {offset}, expected {cursor} "
                "(descriptors must be contiguous and in order)"
            )
        dtype = _WIRE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != count * dtype.itemsize:
            raise FrameError(f"tensor {name!r} length {length} != shape {shape} * itemsize")
        if offset + length > payload_len:
            raise FrameError(f"tensor {name!r} overruns payload at byte {offset + length}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        tensors.append((name, arr.copy()))
        cursor = offset + length
    if cursor != payload_len:
        raise FrameError(f"payload has {payload_len - cursor} trailing bytes after tensors")
    return Frame(msg_type, header, tensors)


def read_frame(recv_exact) -> Frame:
    """Assemble one frame from a callable that returns exactly n bytes."""
    prefix = recv_exact(_HEAD.size)
    magic, version, msg_type, header_len = _HEAD.unpack_from(prefix, 0)
    if magic != MAGIC or version != VERSION:
        raise FrameError(f"bad prefix {prefix!r}")
    if header_len > MAX_HEADER_LEN:
        raise FrameError(f"header_len {header_len} exceeds limit")
    rest = recv_exact(header_len + _PLEN.size)
    (payload_len,) = _PLEN.unpack_from(rest, header_len)
    if payload_len > MAX_PAYLOAD_LEN:
        raise FrameError(f"payload_len {payload_len} exceeds limit")
    payload = recv_exact(payload_len)
    return unpack_frame(prefix + rest + payload)
