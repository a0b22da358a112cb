"""Topic-based pub/sub with QoS 0/1, usable in-process and over TCP."""

from .broker import (
    DEFAULT_ACK_TIMEOUT_MS,
    DEFAULT_BUS_PORT,
    DEFAULT_MAX_RETRIES,
    Broker,
    BrokerServer,
    BrokerStats,
)
from .client import BusClient, Subscription
from .errors import (
    BusError,
    ConnectionClosedError,
    FrameError,
    ProtocolError,
    TopicError,
)
from .framing import MAX_FRAME_BYTES, read_frame, write_frame
from .local import LocalClient
from .protocol import QOS_AT_LEAST_ONCE, QOS_AT_MOST_ONCE, Envelope
from .topics import topic_matches, validate_pattern, validate_topic

__all__ = [
    "Broker",
    "BrokerServer",
    "BrokerStats",
    "BusClient",
    "BusError",
    "ConnectionClosedError",
    "DEFAULT_ACK_TIMEOUT_MS",
    "DEFAULT_BUS_PORT",
    "DEFAULT_MAX_RETRIES",
    "Envelope",
    "FrameError",
    "LocalClient",
    "MAX_FRAME_BYTES",
    "ProtocolError",
    "QOS_AT_LEAST_ONCE",
    "QOS_AT_MOST_ONCE",
    "Subscription",
    "TopicError",
    "topic_matches",
    "read_frame",
    "validate_pattern",
    "validate_topic",
    "write_frame",
]
