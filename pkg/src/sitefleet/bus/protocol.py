"""Session protocol: the envelope type and the op frames both sides exchange.

Every frame is a document with an ``"op"`` field. Clients send ``hello``,
``subscribe``, ``unsubscribe``, ``publish``, and ``ack``; the broker
answers with ``connack``, ``suback``, ``unsuback``, ``puback``, ``deliver``,
and ``error``. Error frames carry a ``ref`` echoing enough of the offending
request for the sender to correlate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

from .errors import ProtocolError
from .topics import validate_topic

QOS_AT_MOST_ONCE = 0
QOS_AT_LEAST_ONCE = 1


@dataclass(frozen=True)
class Envelope:
    """One published message as seen on the bus.

    message_id is assigned by the publisher and strictly increases per
    (publisher, topic); duplicate marks broker retransmissions.
    """

    topic: str
    message_id: int
    qos: int
    timestamp: int
    payload: Mapping
    duplicate: bool = False

    def __post_init__(self) -> None:
        validate_topic(self.topic)
        if self.qos not in (QOS_AT_MOST_ONCE, QOS_AT_LEAST_ONCE):
            raise ProtocolError(f"qos must be 0 or 1, got {self.qos!r}")
        if isinstance(self.message_id, bool) or not isinstance(self.message_id, int):
            raise ProtocolError(f"message_id must be an integer, got {self.message_id!r}")
        if self.message_id < 0:
            raise ProtocolError(f"message_id must be >= 0, got {self.message_id}")
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int):
            raise ProtocolError(f"timestamp must be an integer, got {self.timestamp!r}")
        if not isinstance(self.payload, Mapping):
            raise ProtocolError(f"payload must be an object, got {type(self.payload).__name__}")

    def with_duplicate(self) -> "Envelope":
        return replace(self, duplicate=True)

    def to_doc(self) -> dict:
        return {
            "topic": self.topic,
            "message_id": self.message_id,
            "qos": self.qos,
            "timestamp": self.timestamp,
            "duplicate": self.duplicate,
            "payload": dict(self.payload),
        }

    @classmethod
    def from_doc(cls, doc) -> "Envelope":
        if not isinstance(doc, dict):
            raise ProtocolError(f"envelope must be an object, got {type(doc).__name__}")
        return cls(
            topic=doc.get("topic"),
            message_id=doc.get("message_id"),
            qos=doc.get("qos"),
            timestamp=doc.get("timestamp"),
            payload=doc.get("payload"),
            duplicate=bool(doc.get("duplicate", False)),
        )


def hello_frame(client_id: str) -> dict:
    return {"op": "hello", "client_id": client_id}


def connack_frame(session_id: int) -> dict:
    return {"op": "connack", "session_id": session_id}


def subscribe_frame(sub_id: int, pattern: str) -> dict:
    return {"op": "subscribe", "sub_id": sub_id, "pattern": pattern}


def suback_frame(sub_id: int) -> dict:
    return {"op": "suback", "sub_id": sub_id}


def unsubscribe_frame(sub_id: int) -> dict:
    return {"op": "unsubscribe", "sub_id": sub_id}


def unsuback_frame(sub_id: int) -> dict:
    return {"op": "unsuback", "sub_id": sub_id}


def publish_frame(envelope: Envelope) -> dict:
    return {"op": "publish", "envelope": envelope.to_doc()}


def puback_frame(topic: str, message_id: int, matched: int) -> dict:
    return {"op": "puback", "topic": topic, "message_id": message_id, "matched": matched}


def deliver_frame(delivery_id: int, sub_id: int, envelope: Envelope) -> dict:
    return {"op": "deliver", "delivery_id": delivery_id, "sub_id": sub_id,
            "envelope": envelope.to_doc()}


def ack_frame(delivery_id: int) -> dict:
    return {"op": "ack", "delivery_id": delivery_id}


def error_frame(code: str, detail: str, ref: dict | None = None) -> dict:
    frame = {"op": "error", "code": code, "detail": detail}
    if ref:
        frame["ref"] = ref
    return frame
