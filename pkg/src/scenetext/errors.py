"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so anything a subcommand can
raise should derive from one of the classes below.
"""

from __future__ import annotations


class SceneTextError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SceneTextError):
    """Invalid configuration, request parameters, or input files."""


class LayoutError(ConfigError):
    """Text cannot be laid out inside the requested bounding box."""


class UnsupportedCodepointError(ConfigError):
    """The glyph atlas has no entry for one or more requested codepoints."""

    def __init__(self, codepoints):
        self.codepoints = sorted(set(codepoints))
        listing = ", ".join(f"U+{cp:04X}" for cp in self.codepoints)
        super().__init__(f"atlas has no glyph for: {listing}")


class BackendError(SceneTextError):
    """A denoiser backend failed while servicing a generation job."""


class ProtocolError(BackendError):
    """Fatal wire-protocol violation (bad frame, id mismatch, bad shape)."""


class ServerError(BackendError):
    """The remote server answered with an error frame."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"server error [{code}]: {message}")


class WireTimeout(BackendError):
    """A request timed out; safe to retry."""

    retryable = True


class EvalError(SceneTextError):
    """Evaluation input mismatch (missing records, malformed manifest)."""
