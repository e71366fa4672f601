"""Wire-protocol server around the analytic backbone.

One thread per connection, one in-flight request per connection. Every
session caches the four condition inputs up front (empty/prompt text
embeddings crossed with empty/sketch/perimeter edge maps) so a predict
call is a pure dispatch on its condition selector. Errors travel back as
protocol error frames with machine-readable codes: bad_request,
bad_shape, bad_session, unsupported_op, capability_absent; startup
problems (unloadable glyph bank, requesting scoring without weights)
raise before the socket opens.
"""

from __future__ import annotations

import hashlib
import socket
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .backbone import AnalyticBackbone, embed_prompt, resolve_tokens
from .ocr import BankError, GlyphBank
from .protocol import MSG_ERROR, MSG_RESPONSE, FrameError

CONDITIONS = ("uncond", "text_only", "edge_text", "pip_text")
CONSTRAINED_CONDITIONS = ("edge_text", "pip_text")

BASE_OPS = (
    "capabilities",
    "init_session",
    "predict_noise",
    "predict_noise_batch",
    "encode_latent",
    "decode_latent",
    "shutdown",
)
DEBUG_OPS = ("debug_selectors", "debug_attention")


@dataclass(frozen=True)
class SidecarConfig:
    host: str = "127.0.0.1"
    port: int = 0
    device: str = "cpu"
    backbone_seed: int = 2026
    default_canvas: tuple[int, int] = (512, 512)
    ocr_sheet: str | None = None
    ocr_manifest: str | None = None
    enable_clip: bool = False
    debug: bool = False


@dataclass
class _Session:
    prompt: str
    tokens: list[str]
    token_indices: list[int]
    latent_shape: tuple[int, int, int]
    text: dict = field(default_factory=dict)   # condition -> (n, dim) embedding
    edges: dict = field(default_factory=dict)  # condition -> (h, w) uint8


def _fingerprint(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


class SidecarServer:
    def __init__(self, config: SidecarConfig = SidecarConfig()):
        if config.enable_clip:
            raise BankError(
                "model_load: clip scoring needs an image-text scoring model "
                "and none is bundled; leave enable_clip off"
            )
        self.config = config
        self.backbone = AnalyticBackbone(config.backbone_seed)
        self.bank = None
        if config.ocr_sheet is not None:
            if config.ocr_manifest is None:
                raise BankError("model_load: ocr_sheet given without ocr_manifest")
            self.bank = GlyphBank.load(config.ocr_sheet, config.ocr_manifest)

        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()
        self._shutdown = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener = socket.create_server((config.host, config.port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._accept_thread: threading.Thread | None = None

    # -- lifecycle ---------------------------------------------------

    def start(self) -> "SidecarServer":
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

    def __enter__(self) -> "SidecarServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def serve_forever(self) -> None:
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
        conn.settimeout(0.2)

        def recv_exact(n: int) -> bytes:
            parts = []
            remaining = n
            while remaining:
                try:
                    chunk = conn.recv(min(remaining, 1 << 20))
                except socket.timeout:
                    if self._shutdown.is_set():
                        raise FrameError("shutting down")
                    continue
                except OSError as e:
                    raise FrameError(f"recv failed: {e}") from e
                if not chunk:
                    raise FrameError("connection closed mid-frame")
                parts.append(chunk)
                remaining -= len(chunk)
            return b"".join(parts)

        try:
            while not self._shutdown.is_set():
                try:
                    frame = protocol.read_frame(recv_exact)
                except FrameError:
                    return  # peer hung up or sent garbage
                reply_type, fields, tensors = self._handle(frame)
                fields["id"] = frame.header.get("id")
                try:
                    conn.sendall(protocol.pack_frame(fields, tensors, reply_type))
                except OSError:
                    return
                if frame.header.get("op") == "shutdown":
                    self._shutdown.set()
                    return
        finally:
            conn.close()

    # -- op dispatch -------------------------------------------------

    def _supported_ops(self) -> list[str]:
        ops = list(BASE_OPS)
        if self.bank is not None:
            ops.append("ocr")
        if self.config.debug:
            ops.extend(DEBUG_OPS)
        return sorted(ops)

    def _handle(self, frame: protocol.Frame):
        op = frame.header.get("op")
        try:
            if op == "capabilities":
                return MSG_RESPONSE, {
                    "concurrent": True,
                    "backbone": "analytic",
                    "device": self.config.device,
                    "canvas": list(self.config.default_canvas),
                    "latent_shape": list(
                        self.backbone.latent_shape(self.config.default_canvas)
                    ),
                    "supports": self._supported_ops(),
                }, []
            if op == "init_session":
                return self._init_session(frame)
            if op == "predict_noise":
                return self._predict(frame, batch=False)
            if op == "predict_noise_batch":
                return self._predict(frame, batch=True)
            if op == "encode_latent":
                try:
                    latent = self.backbone.encode_image(frame.tensor("image"))
                except ValueError as e:
                    return self._error("bad_shape", str(e))
                return MSG_RESPONSE, {}, [("latent", latent)]
            if op == "decode_latent":
                try:
                    image = self.backbone.decode_latent(frame.tensor("latent"))
                except ValueError as e:
                    return self._error("bad_shape", str(e))
                return MSG_RESPONSE, {}, [("image", image)]
            if op == "ocr":
                return self._ocr(frame)
            if op == "clip_score":
                return self._error(
                    "capability_absent",
                    "clip scoring is not served; no scoring model is loaded",
                )
            if op == "debug_selectors" and self.config.debug:
                return self._debug_selectors(frame)
            if op == "debug_attention" and self.config.debug:
                return self._debug_attention(frame)
            if op == "shutdown":
                return MSG_RESPONSE, {"stopping": True}, []
            return self._error("unsupported_op", f"server does not serve {op!r}")
        except FrameError as e:
            return self._error("bad_request", str(e))

    @staticmethod
    def _error(code: str, message: str):
        return MSG_ERROR, {"code": code, "message": message}, []

    def _init_session(self, frame: protocol.Frame):
        h = frame.header
        prompt = h.get("prompt")
        wordlist = h.get("wordlist")
        canvas = h.get("canvas")
        if (
            not isinstance(prompt, str)
            or not isinstance(wordlist, list)
            or not isinstance(canvas, list)
            or len(canvas) != 2
        ):
            return self._error(
                "bad_request", "init_session needs prompt, wordlist, and canvas [w, h]"
            )
        try:
            cw, ch = int(canvas[0]), int(canvas[1])
        except (TypeError, ValueError):
            return self._error("bad_request", f"bad canvas {canvas!r}")
        if cw < 1 or ch < 1:
            return self._error("bad_request", f"canvas {cw}x{ch} must be positive")
        edge = frame.tensor("edge")
        pip_edge = frame.tensor("pip_edge")
        if edge.shape != (ch, cw) or pip_edge.shape != (ch, cw):
            return self._error(
                "bad_shape",
                f"edge {edge.shape} / pip_edge {pip_edge.shape} must match canvas ({ch}, {cw})",
            )

        tokens, indices = resolve_tokens(prompt, wordlist)
        session = _Session(
            prompt=prompt,
            tokens=tokens,
            token_indices=indices,
            latent_shape=self.backbone.latent_shape((cw, ch)),
            text={
                "uncond": embed_prompt(""),
                "text_only": embed_prompt(prompt),
                "edge_text": embed_prompt(prompt),
                "pip_text": embed_prompt(prompt),
            },
            edges={
                "uncond": np.zeros((ch, cw), dtype=np.uint8),
                "text_only": np.zeros((ch, cw), dtype=np.uint8),
                "edge_text": edge,
                "pip_text": pip_edge,
            },
        )
        sid = uuid.uuid4().hex
        with self._lock:
            self._sessions[sid] = session
        return MSG_RESPONSE, {
            "session_id": sid,
            "token_indices": sorted(indices),
            "token_count": len(tokens),
            "latent_shape": list(session.latent_shape),
        }, []

    def _get_session(self, header: dict) -> _Session | None:
        with self._lock:
            return self._sessions.get(header.get("session_id"))

    def _parse_directive(self, frame: protocol.Frame) -> dict | None:
        d = frame.header.get("directive")
        if d is None:
            return None
        ok = (
            isinstance(d, dict)
            and isinstance(d.get("token_indices"), list)
            and isinstance(d.get("branches"), list)
            and "strength" in d
        )
        if not ok:
            raise FrameError("malformed directive fields")
        mask = frame.tensor("mask")
        if mask.ndim != 2:
            raise FrameError(f"directive mask must be 2-D, got shape {mask.shape}")
        return {
            "strength": float(d["strength"]),
            "token_indices": [int(i) for i in d["token_indices"]],
            "branches": [str(b) for b in d["branches"]],
            "mask": mask,
        }

    def _predict(self, frame: protocol.Frame, batch: bool):
        h = frame.header
        session = self._get_session(h)
        if session is None:
            return self._error("bad_session", f"unknown session {h.get('session_id')!r}")
        z = frame.tensor("z")
        if z.shape != session.latent_shape:
            return self._error(
                "bad_shape",
                f"latent {z.shape} does not match session shape {session.latent_shape}",
            )
        t = h.get("t")
        if not isinstance(t, int) or t < 1:
            return self._error("bad_request", f"bad timestep {t!r}")
        directive = self._parse_directive(frame)

        def eps_for(cond: str) -> np.ndarray:
            applied = directive if cond in CONSTRAINED_CONDITIONS else None
            return self.backbone.predict(
                z, t, session.text[cond], session.edges[cond], applied
            )

        if not batch:
            cond = h.get("cond")
            if cond not in CONDITIONS:
                return self._error("bad_request", f"unknown condition {cond!r}")
            return MSG_RESPONSE, {}, [("eps", eps_for(cond))]
        conds = h.get("conds")
        if not isinstance(conds, list) or not conds:
            return self._error("bad_request", "predict_noise_batch needs a non-empty conds list")
        if any(c not in CONDITIONS for c in conds):
            return self._error("bad_request", f"unknown condition in {conds!r}")
        return MSG_RESPONSE, {}, [(f"eps_{i}", eps_for(c)) for i, c in enumerate(conds)]

    def _ocr(self, frame: protocol.Frame):
        if self.bank is None:
            return self._error(
                "capability_absent", "ocr is not served; configure a glyph bank"
            )
        image = frame.tensor("image")
        try:
            text = self.bank.recognize(image)
        except ValueError as e:
            return self._error("bad_shape", str(e))
        return MSG_RESPONSE, {"recognized": [] if text is None else [text]}, []

    # -- debug introspection ------------------------------------------

    def _debug_selectors(self, frame: protocol.Frame):
        session = self._get_session(frame.header)
        if session is None:
            return self._error(
                "bad_session", f"unknown session {frame.header.get('session_id')!r}"
            )
        selectors = {
            cond: {
                "text": _fingerprint(session.text[cond]),
                "edge": _fingerprint(session.edges[cond]),
                "edge_empty": not bool(session.edges[cond].any()),
            }
            for cond in CONDITIONS
        }
        return MSG_RESPONSE, {
            "selectors": selectors,
            "prompt_text": _fingerprint(embed_prompt(session.prompt)),
            "empty_text": _fingerprint(embed_prompt("")),
            "token_indices": sorted(session.token_indices),
        }, []

    def _debug_attention(self, frame: protocol.Frame):
        h = frame.header
        session = self._get_session(h)
        if session is None:
            return self._error("bad_session", f"unknown session {h.get('session_id')!r}")
        z = frame.tensor("z")
        if z.shape != session.latent_shape:
            return self._error(
                "bad_shape",
                f"latent {z.shape} does not match session shape {session.latent_shape}",
            )
        t = h.get("t")
        if not isinstance(t, int) or t < 1:
            return self._error("bad_request", f"bad timestep {t!r}")
        cond = h.get("cond")
        if cond not in CONDITIONS:
            return self._error("bad_request", f"unknown condition {cond!r}")
        directive = self._parse_directive(frame)
        applied = directive if cond in CONSTRAINED_CONDITIONS else None

        records: list[dict] = []
        eps = self.backbone.predict(
            z, t, session.text[cond], session.edges[cond], applied, recorder=records
        )
        meta = []
        tensors = [("eps", eps)]
        for i, rec in enumerate(records):
            meta.append({
                "branch": rec["branch"],
                "res": list(rec["res"]),
                "constrained": rec["mask_vec"] is not None,
            })
            tensors.append((f"rec{i}_before", rec["before"]))
            tensors.append((f"rec{i}_after", rec["after"]))
            if rec["mask_vec"] is not None:
                tensors.append((f"rec{i}_mask", rec["mask_vec"]))
        fields = {"records": meta}
        if applied is not None:
            fields["strength"] = applied["strength"]
            fields["token_indices"] = applied["token_indices"]
        return MSG_RESPONSE, fields, tensors
