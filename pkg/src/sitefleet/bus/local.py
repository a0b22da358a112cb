"""In-process bus binding: the same Broker core without sockets.

A LocalClient attaches a synchronous session to a Broker. Delivery happens
inline during publish(): by the time it returns, every matching local
subscriber has the envelope. A synchronous handoff counts as the QoS 1
acknowledgment, and injected drops retry immediately instead of on a
timer, so runs using only local clients are fully deterministic. The
one-process simulation runs on this binding; the TCP path exists for
split-process mode and external tools.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import defaultdict

from .broker import Broker, Delivery
from .client import Subscription
from .errors import ConnectionClosedError, TopicError
from .protocol import QOS_AT_MOST_ONCE, Envelope
from .topics import validate_topic


class _LocalSession:
    def __init__(self, broker: Broker, client: "LocalClient"):
        self._broker = broker
        self._client = client
        self.session_id = broker.new_session_id()
        self.client_id = client.client_id
        self.closed = False

    def send_control(self, frame) -> None:
        pass

    def send_delivery(self, delivery: Delivery) -> None:
        broker = self._broker
        envelope = delivery.envelope
        attempt = 0
        while not self.closed:
            if broker.maybe_drop(envelope, attempt):
                broker.stats.bump("drops")
                if envelope.qos == QOS_AT_MOST_ONCE:
                    return
                attempt += 1
                if attempt > broker.max_retries:
                    broker.stats.bump("exhausted")
                    return
                continue
            outgoing = envelope.with_duplicate() if attempt else envelope
            sub = self._client._subs.get(delivery.sub_id)
            if sub is not None:
                sub._dispatch(outgoing)
            broker.stats.bump("deliveries")
            if attempt:
                broker.stats.bump("redeliveries")
            return

    def on_ack(self, delivery_id: int) -> None:
        pass

    def close(self) -> None:
        self.closed = True


class LocalClient:
    """Socket-free bus session with the same surface as BusClient."""

    def __init__(self, broker: Broker, client_id: str = ""):
        self._broker = broker
        self.client_id = client_id
        self._session = _LocalSession(broker, self)
        self._subs: dict[int, Subscription] = {}
        self._mids = defaultdict(lambda: itertools.count(1))
        self._sub_counter = itertools.count(1)
        self._lock = threading.Lock()
        self._closed = False
        broker.attach(self._session)
        self.session_id = self._session.session_id

    def publish(self, topic: str, payload: dict, qos: int = 0,
                timestamp: int | None = None) -> Envelope:
        """Publish and deliver synchronously to matching local subscribers."""
        if self._closed:
            raise ConnectionClosedError("bus session closed")
        validate_topic(topic)
        ts = int(time.time() * 1000) if timestamp is None else timestamp
        with self._lock:
            message_id = next(self._mids[topic])
        envelope = Envelope(topic, message_id, qos, ts, payload)
        self._broker.op_publish(envelope)
        return envelope

    def subscribe(self, pattern: str, callback=None) -> Subscription:
        if self._closed:
            raise ConnectionClosedError("bus session closed")
        with self._lock:
            sub_id = next(self._sub_counter)
        sub = Subscription(self, sub_id, pattern, callback)
        self._subs[sub_id] = sub
        try:
            self._broker.op_subscribe(self._session, sub_id, pattern)
        except TopicError:
            self._subs.pop(sub_id, None)
            raise
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        self._broker.op_unsubscribe(self._session, sub.sub_id)
        self._subs.pop(sub.sub_id, None)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._broker.detach(self._session)
        self._session.close()
        for sub in list(self._subs.values()):
            sub._push_closed()

    def __enter__(self) -> "LocalClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
