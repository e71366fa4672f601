"""In-process loopback server speaking the denoiser wire protocol.

Answers with deterministic tensors ("echo" returns the request latent as
the noise prediction, "zero" returns zeros), which makes transport and
framing defects stand out: any byte-level corruption breaks the identity.
OCR and CLIP scoring are deliberately not in its capability list so
clients' unsupported-op handling can be exercised.
"""

from __future__ import annotations

import socket
import threading
import uuid

import numpy as np

from .attention import match_wordlist
from .errors import ProtocolError
from . import wire

MODES = ("echo", "zero")

SUPPORTED_OPS = (
    "capabilities",
    "init_session",
    "predict_noise",
    "predict_noise_batch",
    "encode_latent",
    "decode_latent",
    "shutdown",
)


class LoopbackServer:
    """Single-process TCP server; one thread per connection.

    latent_shape fixes the (C, H, W) the server will accept for
    predictions, independent of the session canvas, mirroring how a real
    backend's latent grid is a property of the model, not the request.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        mode: str = "echo",
        latent_shape: tuple[int, int, int] = (3, 64, 64),
    ):
        if mode not in MODES:
            raise ProtocolError(f"unknown loopback mode {mode!r}, pick from {MODES}")
        self.mode = mode
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self._sessions: dict[str, dict] = {}
        self._sessions_lock = threading.Lock()
        self._shutdown = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "LoopbackServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._shutdown.set()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        self._listener.close()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self) -> "LoopbackServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
        """Blocking variant for the CLI; returns after a shutdown op."""
        self.start()
        self._shutdown.wait()
        self.stop()

    def _accept_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        transport = _SocketTransport(conn, self._shutdown)
        try:
            while not self._shutdown.is_set():
                try:
                    frame = wire.read_frame(transport)
                except ProtocolError:
                    return  # peer hung up, sent garbage, or we are stopping
                reply_type, fields, tensors = self._handle(frame)
                fields["id"] = frame.header.get("id")
                transport.send(wire.encode_frame(fields, tensors, reply_type))
                if frame.header.get("op") == "shutdown":
                    self._shutdown.set()
                    return
        finally:
            transport.close()

    def _handle(self, frame: wire.Frame):
        op = frame.header.get("op")
        try:
            if op == "capabilities":
                return wire.MSG_RESPONSE, {
                    "concurrent": True,
                    "latent_shape": list(self.latent_shape),
                    "mode": self.mode,
                    "supports": list(SUPPORTED_OPS),
                }, []
            if op == "init_session":
                return self._init_session(frame)
            if op == "predict_noise":
                return self._predict(frame, batch=False)
            if op == "predict_noise_batch":
                return self._predict(frame, batch=True)
            if op == "encode_latent":
                image = frame.tensor("image")
                return wire.MSG_RESPONSE, {}, [("latent", image.astype("<f4"))]
            if op == "decode_latent":
                latent = frame.tensor("latent")
                return wire.MSG_RESPONSE, {}, [("image", latent)]
            if op == "shutdown":
                return wire.MSG_RESPONSE, {"stopping": True}, []
            return wire.MSG_ERROR, {
                "code": "unsupported_op",
                "message": f"loopback server does not implement {op!r}",
            }, []
        except ProtocolError as e:
            return wire.MSG_ERROR, {"code": "bad_request", "message": str(e)}, []

    def _init_session(self, frame: wire.Frame):
        h = frame.header
        prompt = h.get("prompt")
        wordlist = h.get("wordlist")
        if not isinstance(prompt, str) or not isinstance(wordlist, list):
            return wire.MSG_ERROR, {
                "code": "bad_request",
                "message": "init_session needs a prompt string and a wordlist",
            }, []
        edge = frame.tensor("edge")
        pip_edge = frame.tensor("pip_edge")
        if edge.shape != pip_edge.shape:
            return wire.MSG_ERROR, {
                "code": "bad_shape",
                "message": f"edge {edge.shape} and pip_edge {pip_edge.shape} disagree",
            }, []
        tokens, indices = match_wordlist(prompt, wordlist)
        session_id = uuid.uuid4().hex
        with self._sessions_lock:
            self._sessions[session_id] = {
                "prompt": prompt,
                "tokens": tokens,
                "edge": edge,
                "pip_edge": pip_edge,
            }
        return wire.MSG_RESPONSE, {
            "session_id": session_id,
            "token_indices": sorted(indices),
            "token_count": len(tokens),
            "latent_shape": list(self.latent_shape),
        }, []

    def _predict(self, frame: wire.Frame, batch: bool):
        h = frame.header
        sid = h.get("session_id")
        with self._sessions_lock:
            known = sid in self._sessions
        if not known:
            return wire.MSG_ERROR, {
                "code": "bad_session",
                "message": f"unknown session {sid!r}",
            }, []
        z = frame.tensor("z")
        if z.shape != self.latent_shape:
            return wire.MSG_ERROR, {
                "code": "bad_shape",
                "message": f"latent {z.shape} does not match server shape {self.latent_shape}",
            }, []
        t = h.get("t")
        if not isinstance(t, int) or t < 1:
            return wire.MSG_ERROR, {
                "code": "bad_request",
                "message": f"bad timestep {t!r}",
            }, []
        directive = h.get("directive")
        if directive is not None:
            ok = (
                isinstance(directive, dict)
                and isinstance(directive.get("token_indices"), list)
                and isinstance(directive.get("branches"), list)
                and "strength" in directive
                and any(name == "mask" for name, _ in frame.tensors)
            )
            if not ok:
                return wire.MSG_ERROR, {
                    "code": "bad_request",
                    "message": "malformed directive fields or missing mask tensor",
                }, []

        def response_for(_cond: str) -> np.ndarray:
            if self.mode == "echo":
                return z
            return np.zeros_like(z)

        if not batch:
            cond = h.get("cond")
            if cond not in ("uncond", "text_only", "edge_text", "pip_text"):
                return wire.MSG_ERROR, {
                    "code": "bad_request",
                    "message": f"unknown condition {cond!r}",
                }, []
            return wire.MSG_RESPONSE, {}, [("eps", response_for(cond))]
        conds = h.get("conds")
        if not isinstance(conds, list) or not conds:
            return wire.MSG_ERROR, {
                "code": "bad_request",
                "message": "predict_noise_batch needs a non-empty conds list",
            }, []
        tensors = [(f"eps_{i}", response_for(c)) for i, c in enumerate(conds)]
        return wire.MSG_RESPONSE, {}, tensors


class _SocketTransport(wire.Transport):
    """Server-side transport; wakes up periodically to notice shutdown."""

    def __init__(self, sock: socket.socket, shutdown: threading.Event):
        self.sock = sock
        self.sock.settimeout(0.2)
        self._shutdown = shutdown

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise ProtocolError(f"send failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        parts = []
        remaining = n
        while remaining:
            try:
                chunk = self.sock.recv(min(remaining, 1 << 20))
            except socket.timeout:
                # Between frames an idle wait is fine; mid-frame we keep
                # waiting so in-flight requests still complete.
                if self._shutdown.is_set() and remaining == n and not parts:
                    raise ProtocolError("server stopping")
                continue
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
