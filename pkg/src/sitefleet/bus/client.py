"""TCP bus client: publish, subscribe with wildcards, QoS 1 auto-ack.

One reader thread dispatches deliveries and resolves broker replies.
Publishing is safe from multiple threads; the per-(publisher, topic)
message_id sequence is assigned under the write lock, so wire order and
message_id order always agree. Subscriptions either queue envelopes for
`get()`/`drain()` or invoke a callback on the reader thread; callbacks
must return quickly or they will delay later deliveries and acks.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time
from collections import defaultdict

from .errors import BusError, ConnectionClosedError, ProtocolError
from .framing import read_frame, write_frame
from .protocol import (
    QOS_AT_LEAST_ONCE,
    Envelope,
    ack_frame,
    hello_frame,
    publish_frame,
    subscribe_frame,
    unsubscribe_frame,
)
from .topics import validate_topic

log = logging.getLogger(__name__)

_CLOSED = object()


class _Waiter:
    def __init__(self) -> None:
        self._event = threading.Event()
        self._result = None
        self._error = None

    def resolve(self, result) -> None:
        self._result = result
        self._event.set()

    def fail(self, error: Exception) -> None:
        self._error = error
        self._event.set()

    def wait(self, timeout: float):
        if not self._event.wait(timeout):
            raise BusError(f"no broker reply within {timeout} s")
        if self._error is not None:
            raise self._error
        return self._result


class Subscription:
    """Handle for one subscription; queue-backed unless a callback was given."""

    def __init__(self, client, sub_id: int, pattern: str, callback=None):
        self.sub_id = sub_id
        self.pattern = pattern
        self._client = client
        self._callback = callback
        self._queue = queue.SimpleQueue() if callback is None else None

    def _dispatch(self, envelope: Envelope) -> None:
        if self._callback is not None:
            try:
                self._callback(envelope)
            except Exception:
                log.exception("subscription %r: callback failed", self.pattern)
        else:
            self._queue.put(envelope)

    def _push_closed(self) -> None:
        if self._queue is not None:
            self._queue.put(_CLOSED)

    def get(self, timeout: float | None = None) -> Envelope:
        """Next envelope, blocking up to timeout seconds."""
        if self._queue is None:
            raise BusError("subscription dispatches to a callback; get() is unavailable")
        try:
            item = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message within {timeout} s on {self.pattern!r}") from None
        if item is _CLOSED:
            self._queue.put(_CLOSED)
            raise ConnectionClosedError("bus connection closed")
        return item

    def drain(self) -> list:
        """All envelopes queued so far, without blocking."""
        if self._queue is None:
            raise BusError("subscription dispatches to a callback; drain() is unavailable")
        out = []
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return out
            if item is _CLOSED:
                self._queue.put(_CLOSED)
                return out
            out.append(item)

    def unsubscribe(self) -> None:
        self._client._unsubscribe(self)


class BusClient:
    """One TCP session against a BrokerServer."""

    def __init__(self, host: str, port: int, client_id: str = "",
                 op_timeout: float = 10.0):
        self.client_id = client_id
        self._op_timeout = op_timeout
        self._sock = socket.create_connection((host, port), timeout=op_timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._wlock = threading.Lock()
        self._pending: dict[tuple, _Waiter] = {}
        self._subs: dict[int, Subscription] = {}
        self._mids = defaultdict(lambda: itertools.count(1))
        self._sub_counter = itertools.count(1)
        self._closed = False
        self._reader = threading.Thread(
            target=self._read_loop, name=f"bus-client-{client_id or id(self)}", daemon=True
        )
        waiter = self._register(("connack",))
        self._reader.start()
        with self._wlock:
            write_frame(self._sock, hello_frame(client_id))
        self.session_id = waiter.wait(op_timeout)

    # request plumbing

    def _register(self, key: tuple) -> _Waiter:
        waiter = _Waiter()
        self._pending[key] = waiter
        return waiter

    def _resolve(self, key: tuple, result) -> None:
        waiter = self._pending.pop(key, None)
        if waiter is not None:
            waiter.resolve(result)

    def _read_loop(self) -> None:
        while True:
            try:
                frame = read_frame(self._sock)
            except (OSError, BusError):
                break
            if frame is None or not isinstance(frame, dict):
                break
            op = frame.get("op")
            if op == "deliver":
                self._on_deliver(frame)
            elif op == "puback":
                self._resolve(("pub", frame.get("topic"), frame.get("message_id")),
                              frame.get("matched"))
            elif op == "suback":
                self._resolve(("sub", frame.get("sub_id")), None)
            elif op == "unsuback":
                self._resolve(("unsub", frame.get("sub_id")), None)
            elif op == "connack":
                self._resolve(("connack",), frame.get("session_id"))
            elif op == "error":
                self._on_error(frame)
        self._shutdown()

    def _on_deliver(self, frame: dict) -> None:
        try:
            envelope = Envelope.from_doc(frame.get("envelope"))
        except BusError:
            log.exception("dropping undecodable delivery")
            return
        sub = self._subs.get(frame.get("sub_id"))
        if sub is not None:
            sub._dispatch(envelope)
        if envelope.qos == QOS_AT_LEAST_ONCE:
            delivery_id = frame.get("delivery_id")
            try:
                with self._wlock:
                    write_frame(self._sock, ack_frame(delivery_id))
            except OSError:
                pass

    def _on_error(self, frame: dict) -> None:
        ref = frame.get("ref") or {}
        error = ProtocolError(f"{frame.get('code')}: {frame.get('detail')}")
        if ref.get("op") == "publish":
            self._resolve_error(("pub", ref.get("topic"), ref.get("message_id")), error)
        elif ref.get("op") == "subscribe":
            self._resolve_error(("sub", ref.get("sub_id")), error)
        else:
            log.warning("broker error: %s", error)

    def _resolve_error(self, key: tuple, error: Exception) -> None:
        waiter = self._pending.pop(key, None)
        if waiter is not None:
            waiter.fail(error)
        else:
            log.warning("broker error with no waiter: %s", error)

    def _shutdown(self) -> None:
        self._closed = True
        for key in list(self._pending):
            waiter = self._pending.pop(key, None)
            if waiter is not None:
                waiter.fail(ConnectionClosedError("bus connection closed"))
        for sub in list(self._subs.values()):
            sub._push_closed()
        try:
            self._sock.close()
        except OSError:
            pass

    # public surface

    def publish(self, topic: str, payload: dict, qos: int = 0,
                timestamp: int | None = None) -> Envelope:
        """Publish one payload; QoS 1 blocks until the broker confirms."""
        if self._closed:
            raise ConnectionClosedError("bus connection closed")
        validate_topic(topic)
        ts = int(time.time() * 1000) if timestamp is None else timestamp
        waiter = None
        with self._wlock:
            message_id = next(self._mids[topic])
            envelope = Envelope(topic, message_id, qos, ts, payload)
            if qos == QOS_AT_LEAST_ONCE:
                waiter = self._register(("pub", topic, message_id))
            write_frame(self._sock, publish_frame(envelope))
        if waiter is not None:
            waiter.wait(self._op_timeout)
        return envelope

    def subscribe(self, pattern: str, callback=None) -> Subscription:
        """Register a filter; blocks until the broker confirms it."""
        if self._closed:
            raise ConnectionClosedError("bus connection closed")
        sub_id = next(self._sub_counter)
        sub = Subscription(self, sub_id, pattern, callback)
        self._subs[sub_id] = sub
        waiter = self._register(("sub", sub_id))
        with self._wlock:
            write_frame(self._sock, subscribe_frame(sub_id, pattern))
        try:
            waiter.wait(self._op_timeout)
        except BusError:
            self._subs.pop(sub_id, None)
            raise
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        if self._closed:
            return
        waiter = self._register(("unsub", sub.sub_id))
        with self._wlock:
            write_frame(self._sock, unsubscribe_frame(sub.sub_id))
        waiter.wait(self._op_timeout)
        self._subs.pop(sub.sub_id, None)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        if threading.current_thread() is not self._reader:
            self._reader.join(timeout=2.0)

    def __enter__(self) -> "BusClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
