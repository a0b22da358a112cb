"""Error types shared by the bus broker, clients, and wire helpers."""

from .. import SiteFleetError


class BusError(SiteFleetError):
    """Base class for messaging failures."""


class TopicError(BusError, ValueError):
    """Malformed topic or subscription pattern."""


class FrameError(BusError):
    """Wire-level framing violation (oversized, truncated, or unparseable)."""


class ProtocolError(BusError):
    """The peer rejected an operation with an error frame."""


class ConnectionClosedError(BusError):
    """The session ended before or during the attempted operation."""
